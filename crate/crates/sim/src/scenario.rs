use std::collections::BTreeSet;
use std::str::FromStr;
use std::time::Instant;

use creditnet_core::chord::{ChordError, ChordRing};
use creditnet_core::model::{generate_network, ModelError, NetworkConfig};
use creditnet_core::prefix::{PrefixEmbedding, RoutingError};
use creditnet_core::protocol::bailout::candidate_pool;
use creditnet_core::protocol::{
    bailout, bt_accept, bt_broadcast, bt_respond, complete_transfer, eligible_subject, Accepted,
    BailoutConfig, BalanceTransferRequest, ChordRouter, Delivery, PrefixRouter, ProtocolError,
    ResponsePolicy, ResponseRouter, ScriptedLending, TransferResponse, World,
};
use creditnet_core::{Amount, CreditNetwork, NodeId, Rate, RequestId, Tick};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adversary::{inject_adversary, run_audit, AdversarySpec, AuditReport};
use crate::config::{ConfigError, Responders, SimConfig};
use crate::metrics::MetricsRecord;
use crate::sched::{EventKind, ScheduleError, Scheduler};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Chord(#[from] ChordError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("adversary: {0}")]
    Adversary(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    PrefixBt,
    ChordBt,
    Bailout,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::PrefixBt => "prefix-bt",
            Scenario::ChordBt => "chord-bt",
            Scenario::Bailout => "bailout",
        }
    }

    pub fn ops(self) -> &'static [&'static str] {
        match self {
            Scenario::PrefixBt => &["setup", "broadcast", "findroute", "findroute+response"],
            Scenario::ChordBt => &[
                "setup",
                "broadcast",
                "lookup+response",
                "reassign+stabilize",
            ],
            Scenario::Bailout => &["setup", "findroute", "create-edges"],
        }
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "prefix-bt" => Ok(Scenario::PrefixBt),
            "chord-bt" => Ok(Scenario::ChordBt),
            "bailout" => Ok(Scenario::Bailout),
            other => Err(SimError::UnknownScenario(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BailoutResult {
    pub requestor: NodeId,
    pub landmark: NodeId,
    pub links: Vec<(NodeId, Amount)>,
    pub fee: Amount,
    pub rounds: usize,
    pub candidates: Vec<Vec<NodeId>>,
    pub failed: bool,
}

pub struct RunOutput {
    pub scenario: Scenario,
    pub records: Vec<MetricsRecord>,
    /// Scheduler trace, one line per event.
    pub trace: Vec<String>,
    pub world: World,
    pub requestor: NodeId,
    pub request: Option<BalanceTransferRequest>,
    pub accepted: Vec<Accepted>,
    pub completed: Vec<NodeId>,
    pub deliveries: Vec<Delivery>,
    pub audit: AuditReport,
    pub bailout: Option<BailoutResult>,
}

impl RunOutput {
    pub fn ledger_text(&self) -> String {
        self.world.ledger.to_text()
    }

    pub fn record(&self, op: &str) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.op == op)
    }
}

pub fn network_config(cfg: &SimConfig) -> NetworkConfig {
    let n = &cfg.network;
    NetworkConfig {
        node_count: n.nodes,
        edge_density: n.density,
        seed: cfg.seed,
        interest_range: (Rate(n.min_interest), Rate(n.max_interest)),
        weight_range: (n.min_weight, n.max_weight),
    }
}

/// Best connected node, smallest id on ties.
pub fn embedding_root(net: &CreditNetwork) -> NodeId {
    net.nodes()
        .max_by(|&a, &b| net.degree(a).cmp(&net.degree(b)).then(b.cmp(&a)))
        .expect("non-empty network")
}

fn bt_requestor(cfg: &SimConfig, net: &CreditNetwork) -> Result<NodeId, SimError> {
    let i = match cfg.transfer.requestor {
        Some(i) => NodeId(i),
        None => {
            let nodes: Vec<NodeId> = net.nodes().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_edb7);
            nodes[rng.gen_range(0..nodes.len())]
        }
    };
    if !net.contains(i) {
        return Err(ModelError::UnknownNode(i).into());
    }
    Ok(i)
}

/// Nodes ordered by how few lenders they have, then id.
fn needy_nodes(net: &CreditNetwork) -> Vec<NodeId> {
    let mut v: Vec<(usize, NodeId)> = net
        .nodes()
        .map(|n| (net.lender_links(n).count(), n))
        .collect();
    v.sort();
    v.into_iter().map(|(_, n)| n).collect()
}

fn response_policy(cfg: &SimConfig) -> ResponsePolicy {
    match &cfg.transfer.responders {
        Responders::Rule => ResponsePolicy::Rule,
        Responders::Probabilistic { p } => ResponsePolicy::Probabilistic {
            p: *p,
            seed: cfg.seed,
        },
        Responders::Only { nodes } => {
            ResponsePolicy::Only(nodes.iter().map(|&n| NodeId(n)).collect())
        }
    }
}

fn lending_policy(cfg: &SimConfig) -> ScriptedLending {
    ScriptedLending {
        offers: cfg
            .lending
            .offer
            .iter()
            .map(|o| (NodeId(o.node), o.amount))
            .collect(),
        default: cfg.lending.default,
    }
}

/// Messages and time spent in tree construction: every link is probed from
/// both ends and every node receives its coordinate.
fn tree_setup_cost(net: &CreditNetwork) -> u64 {
    (2 * net.link_count() + net.node_count()) as u64
}

pub fn run_scenario(cfg: &SimConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let scenario: Scenario = cfg.scenario.parse()?;
    let net = generate_network(&network_config(cfg))?;
    let spec = cfg.adversary.to_spec()?;
    match scenario {
        Scenario::PrefixBt | Scenario::ChordBt => run_bt(cfg, scenario, net, &spec),
        Scenario::Bailout => run_bailout(cfg, net, &spec),
    }
}

#[derive(Debug)]
enum Step {
    Setup,
    Broadcast,
    Respond(NodeId),
    Accept,
    Complete(usize),
    Reassign(NodeId),
    Stabilize,
    ReEmbed,
}

enum Overlay {
    Prefix { emb: PrefixEmbedding, salt: u64 },
    Chord(ChordRing),
    Pending,
}

struct BtState<'a> {
    cfg: &'a SimConfig,
    scenario: Scenario,
    world: World,
    overlay: Overlay,
    bt: BalanceTransferRequest,
    policy: ResponsePolicy,
    spec: &'a AdversarySpec,
    responses: Vec<TransferResponse>,
    deliveries: Vec<Delivery>,
    accepted: Vec<Accepted>,
    completed: Vec<NodeId>,
    rows: Vec<MetricsRecord>,
    hops: Vec<Vec<usize>>,
    after_accept: bool,
}

fn with_router<T>(
    overlay: &Overlay,
    requestor: NodeId,
    f: impl FnOnce(&dyn ResponseRouter) -> T,
) -> Result<T, SimError> {
    match overlay {
        Overlay::Prefix { emb, salt } => {
            let router = PrefixRouter {
                embedding: emb,
                target: emb.hashed_id_seeded(requestor, *salt)?,
                alternates: true,
            };
            Ok(f(&router))
        }
        Overlay::Chord(ring) => {
            let key = ring
                .ring_id(requestor)
                .ok_or(ChordError::UnknownNode(requestor))?;
            Ok(f(&ChordRouter { ring, key }))
        }
        Overlay::Pending => unreachable!("router used before setup"),
    }
}

impl BtState<'_> {
    fn handle(&mut self, sched: &mut Scheduler<Step>, step: Step) -> Result<(), SimError> {
        self.world.now = sched.now();
        let start = Instant::now();
        let msgs = self.world.messages;
        let trace_at = self.world.trace.len();
        let i = self.bt.requestor;
        let row = match step {
            Step::Setup => {
                let (overlay, cost) = match self.scenario {
                    Scenario::PrefixBt => {
                        let emb = PrefixEmbedding::build(
                            &self.world.net,
                            embedding_root(&self.world.net),
                            self.cfg.seed,
                        )?;
                        (
                            Overlay::Prefix {
                                emb,
                                salt: self.cfg.seed,
                            },
                            tree_setup_cost(&self.world.net),
                        )
                    }
                    _ => {
                        let mut ring = ChordRing::new(self.cfg.ring.bits)?;
                        let nodes: Vec<NodeId> = self.world.net.nodes().collect();
                        for &n in &nodes {
                            ring.join(n)?;
                        }
                        let (fixes, _) =
                            ring.stabilize_until_quiescent(self.cfg.ring.max_stabilize_rounds);
                        self.bt.key = ring.ring_id(i);
                        sched.schedule(
                            sched.now() + self.cfg.ring.stabilize_interval,
                            EventKind::Stabilize,
                            Step::Stabilize,
                        )?;
                        (Overlay::Chord(ring), (nodes.len() + fixes) as u64)
                    }
                };
                self.overlay = overlay;
                self.rows[0].cost += cost;
                self.rows[0].messages += cost;
                sched.schedule(self.bt.issued_at, EventKind::Broadcast, Step::Broadcast)?;
                0
            }
            Step::Broadcast => {
                let recipients = bt_broadcast(&mut self.world, &self.bt);
                self.rows[1].cost += 1;
                for j in recipients {
                    sched.schedule(self.bt.issued_at + 1, EventKind::Respond, Step::Respond(j))?;
                }
                sched.schedule(self.bt.tp + 1, EventKind::Accept, Step::Accept)?;
                1
            }
            Step::Respond(j) => {
                if self.spec.is_selective(j)
                    || eligible_subject(&self.world.net, j, &self.bt, &self.policy).is_none()
                {
                    return Ok(());
                }
                let response_row = if self.scenario == Scenario::PrefixBt {
                    // the route as planned from coordinates alone
                    let t = Instant::now();
                    if let Overlay::Prefix { emb, salt } = &self.overlay {
                        let target = emb.hashed_id_seeded(i, *salt)?;
                        let planned = emb.find_route(j, i, &target)?.hops.len();
                        let r = &mut self.rows[2];
                        r.cost += planned as u64;
                        r.wall_us += t.elapsed().as_micros();
                        self.hops[2].push(planned);
                    }
                    3
                } else {
                    2
                };
                let (world, bt, policy) = (&mut self.world, &self.bt, &self.policy);
                let got = with_router(&self.overlay, i, |router| {
                    bt_respond(world, bt, j, router, policy)
                })?;
                if let Some((resp, d)) = got {
                    self.hops[response_row].push(d.hops());
                    self.responses.extend(resp);
                    self.deliveries.push(d);
                }
                response_row
            }
            Step::Accept => {
                let out = bt_accept(&mut self.world, &self.bt, &self.responses, sched.now())?;
                for k in 0..out.accepted.len() {
                    sched.schedule(
                        sched.now() + 1 + k as Tick,
                        EventKind::Multisig,
                        Step::Complete(k),
                    )?;
                }
                let after = sched.now() + 1 + out.accepted.len() as Tick;
                if self.scenario == Scenario::PrefixBt {
                    sched.schedule(after, EventKind::ReEmbed, Step::ReEmbed)?;
                }
                self.accepted = out.accepted;
                self.after_accept = true;
                self.response_row()
            }
            Step::Complete(k) => {
                let a = self.accepted[k].clone();
                // a stale subject is skipped, not fatal
                if complete_transfer(&mut self.world, &self.bt, &a).is_ok() {
                    self.completed.push(a.responder);
                    if self.scenario == Scenario::ChordBt {
                        sched.schedule(
                            sched.now() + 1,
                            EventKind::BailoutStep,
                            Step::Reassign(a.responder),
                        )?;
                    }
                }
                self.response_row()
            }
            Step::Reassign(j) => {
                if let Overlay::Chord(ring) = &mut self.overlay {
                    let (_, fixes) = ring.reposition(j)?;
                    self.rows[3].cost += 1 + fixes as u64;
                }
                3
            }
            Step::Stabilize => {
                if let Overlay::Chord(ring) = &mut self.overlay {
                    let fixes = ring.stabilize() as u64;
                    let r = if self.after_accept { 3 } else { 0 };
                    self.rows[r].cost += fixes;
                    self.rows[r].messages += fixes;
                }
                if sched.pending() > 0 {
                    sched.schedule(
                        sched.now() + self.cfg.ring.stabilize_interval,
                        EventKind::Stabilize,
                        Step::Stabilize,
                    )?;
                }
                if self.after_accept {
                    3
                } else {
                    0
                }
            }
            Step::ReEmbed => {
                if let Overlay::Prefix { emb, .. } = &mut self.overlay {
                    // a settled link can strand the old lender; keep the old tree then
                    match PrefixEmbedding::build(
                        &self.world.net,
                        embedding_root(&self.world.net),
                        self.cfg.seed,
                    ) {
                        Ok(e) => *emb = e,
                        Err(RoutingError::Unreachable(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
                return Ok(());
            }
        };
        let r = &mut self.rows[row];
        r.wall_us += start.elapsed().as_micros();
        r.messages += self.world.messages - msgs;
        if matches!(r.op.as_str(), "findroute+response" | "lookup+response") {
            r.cost += self.world.messages - msgs;
        }
        r.count_trace(&self.world.trace[trace_at..]);
        Ok(())
    }

    fn response_row(&self) -> usize {
        if self.scenario == Scenario::PrefixBt {
            3
        } else {
            2
        }
    }
}

fn run_bt(
    cfg: &SimConfig,
    scenario: Scenario,
    net: CreditNetwork,
    spec: &AdversarySpec,
) -> Result<RunOutput, SimError> {
    let i = bt_requestor(cfg, &net)?;
    let n = net.node_count();
    let mut world = World::deterministic(net);
    spec.validate(&world, None).map_err(SimError::Adversary)?;
    inject_adversary(&mut world, spec);
    let bt = BalanceTransferRequest {
        requestor: i,
        amt: cfg.transfer.amt,
        intr: Rate(cfg.transfer.intr),
        tp: 1 + cfg.transfer.window,
        issued_at: 1,
        key: None,
        request_id: RequestId::new(format!("bt/{}/{}", cfg.seed, i)),
    };
    let mut st = BtState {
        cfg,
        scenario,
        world,
        overlay: Overlay::Pending,
        bt,
        policy: response_policy(cfg),
        spec,
        responses: Vec::new(),
        deliveries: Vec::new(),
        accepted: Vec::new(),
        completed: Vec::new(),
        rows: scenario
            .ops()
            .iter()
            .map(|op| MetricsRecord::new(scenario.name(), n, op))
            .collect(),
        hops: vec![Vec::new(); 4],
        after_accept: false,
    };
    let mut sched = Scheduler::new();
    sched.schedule(0, EventKind::ReEmbed, Step::Setup)?;
    sched.run(&mut st, |s, st, ev| st.handle(s, ev.payload))?;

    for (r, h) in st.rows.iter_mut().zip(&st.hops) {
        r.set_hops(h);
    }

    let audit = {
        let (world, deliveries) = (&mut st.world, &st.deliveries);
        with_router(&st.overlay, i, |router| {
            run_audit(world, deliveries, router, spec)
        })?
    };
    Ok(RunOutput {
        scenario,
        records: st.rows,
        trace: sched.into_trace(),
        world: st.world,
        requestor: i,
        request: Some(st.bt),
        accepted: st.accepted,
        completed: st.completed,
        deliveries: st.deliveries,
        audit,
        bailout: None,
    })
}

#[derive(Debug)]
enum BailoutStep {
    Setup,
    FindRoute,
    CreateEdges,
}

fn run_bailout(
    cfg: &SimConfig,
    net: CreditNetwork,
    spec: &AdversarySpec,
) -> Result<RunOutput, SimError> {
    let n = net.node_count();
    let needy = needy_nodes(&net);
    let i = match cfg.bailout.requestor {
        Some(i) => NodeId(i),
        None => needy[0],
    };
    if !net.contains(i) {
        return Err(ModelError::UnknownNode(i).into());
    }
    let mut world = World::deterministic(net);
    let lm = world.net.next_free_id();
    spec.validate(&world, Some(lm))
        .map_err(SimError::Adversary)?;
    inject_adversary(&mut world, spec);
    let bcfg = BailoutConfig {
        m_out: cfg.bailout.m_out,
        tr: cfg.bailout.tr,
        fee_per_link: cfg.bailout.fee_per_link,
        max_rounds: cfg.bailout.max_rounds,
        interest: Rate(cfg.bailout.interest),
        ..Default::default()
    };
    let mut policy = lending_policy(cfg);
    let mut rows: Vec<MetricsRecord> = Scenario::Bailout
        .ops()
        .iter()
        .map(|op| MetricsRecord::new("bailout", n, op))
        .collect();
    let mut emb: Option<PrefixEmbedding> = None;
    let mut result: Option<BailoutResult> = None;

    let mut sched = Scheduler::new();
    sched.schedule(0, EventKind::BailoutStep, BailoutStep::Setup)?;
    let mut state = ();
    sched.run(&mut state, |s, _, ev| -> Result<(), SimError> {
        world.now = s.now();
        let start = Instant::now();
        let msgs = world.messages;
        let trace_at = world.trace.len();
        let row = match ev.payload {
            BailoutStep::Setup => {
                emb = Some(PrefixEmbedding::build(
                    &world.net,
                    embedding_root(&world.net),
                    cfg.seed,
                )?);
                rows[0].cost = tree_setup_cost(&world.net);
                rows[0].messages = rows[0].cost;
                s.schedule(s.now() + 1, EventKind::BailoutStep, BailoutStep::FindRoute)?;
                0
            }
            BailoutStep::FindRoute => {
                // the landmark ranks every node, then each chosen candidate
                // is reached over the tree
                let emb = emb.as_ref().expect("setup ran");
                let reps = cfg.bailout.reps;
                let mut hops = Vec::new();
                let mut total = 0u64;
                for r in 0..reps {
                    let who = if r == 0 { i } else { needy[r % needy.len()] };
                    let pool = candidate_pool(&world, who, lm);
                    total += world.net.node_count() as u64;
                    for &c in pool.iter().take(bcfg.m_out) {
                        let h = emb.distance(who, c)?;
                        total += h as u64;
                        hops.push(h);
                    }
                }
                rows[1].cost = total / reps as u64;
                rows[1].messages = hops.iter().sum::<usize>() as u64 / reps as u64;
                rows[1].set_hops(&hops);
                s.schedule(
                    s.now() + 1,
                    EventKind::BailoutStep,
                    BailoutStep::CreateEdges,
                )?;
                1
            }
            BailoutStep::CreateEdges => {
                result = Some(match bailout(&mut world, i, &bcfg, &mut policy) {
                    Ok(out) => BailoutResult {
                        requestor: i,
                        landmark: out.landmark,
                        links: out.links,
                        fee: out.fee,
                        rounds: out.rounds,
                        candidates: out.candidates,
                        failed: false,
                    },
                    Err(ProtocolError::BailoutFailed { rounds }) => BailoutResult {
                        requestor: i,
                        landmark: lm,
                        links: Vec::new(),
                        fee: 0,
                        rounds,
                        candidates: Vec::new(),
                        failed: true,
                    },
                    Err(e) => return Err(e.into()),
                });
                rows[2].messages = world.messages - msgs;
                rows[2].cost = rows[2].messages;
                2
            }
        };
        rows[row].wall_us += start.elapsed().as_micros();
        rows[row].count_trace(&world.trace[trace_at..]);
        Ok(())
    })?;

    let emb = emb.expect("setup ran");
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(i, cfg.seed)?,
        alternates: true,
    };
    let audit = run_audit(&mut world, &[], &router, spec);
    Ok(RunOutput {
        scenario: Scenario::Bailout,
        records: rows,
        trace: sched.into_trace(),
        world,
        requestor: i,
        request: None,
        accepted: Vec::new(),
        completed: Vec::new(),
        deliveries: Vec::new(),
        audit,
        bailout: result,
    })
}

/// Responders that would answer `bt` at the start of a run.
pub fn eligible_responders(
    net: &CreditNetwork,
    bt: &BalanceTransferRequest,
    spec: &AdversarySpec,
) -> BTreeSet<NodeId> {
    net.nodes()
        .filter(|&j| {
            !spec.is_selective(j) && eligible_subject(net, j, bt, &ResponsePolicy::Rule).is_some()
        })
        .collect()
}
