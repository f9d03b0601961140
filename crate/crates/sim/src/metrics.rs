use std::fmt;

use creditnet_core::protocol::TraceEvent;

/// One row per scenario phase. Everything except `wall_us` is reproducible
/// from the config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub scenario: String,
    pub node_count: usize,
    pub op: String,
    pub wall_us: u128,
    pub messages: u64,
    /// Simulator events charged to the phase.
    pub cost: u64,
    pub hops_min: usize,
    pub hops_mean: f64,
    pub hops_max: usize,
    pub links_created: usize,
    pub links_destroyed: usize,
    pub ledger_writes: usize,
}

impl MetricsRecord {
    pub fn new(scenario: &str, node_count: usize, op: &str) -> Self {
        Self {
            scenario: scenario.into(),
            node_count,
            op: op.into(),
            ..Default::default()
        }
    }

    pub fn set_hops(&mut self, hops: &[usize]) {
        if hops.is_empty() {
            return;
        }
        self.hops_min = *hops.iter().min().unwrap();
        self.hops_max = *hops.iter().max().unwrap();
        self.hops_mean = hops.iter().sum::<usize>() as f64 / hops.len() as f64;
    }

    /// Adds the link changes and ledger writes found in a trace slice.
    pub fn count_trace(&mut self, events: &[TraceEvent]) {
        for ev in events {
            match ev {
                TraceEvent::LinkChanged { change, .. } => {
                    if change.before == 0 && change.after > 0 {
                        self.links_created += 1;
                    } else if change.before > 0 && change.after == 0 {
                        self.links_destroyed += 1;
                    }
                }
                TraceEvent::LedgerWrite { .. } => self.ledger_writes += 1,
                _ => {}
            }
        }
    }

    /// The line without wall time, for replay comparison.
    pub fn stable_line(&self) -> String {
        self.line(None)
    }

    fn line(&self, wall: Option<u128>) -> String {
        let mut s = format!(
            "scenario={} nodes={} op={}",
            self.scenario, self.node_count, self.op
        );
        if let Some(w) = wall {
            s.push_str(&format!(" wall_us={w}"));
        }
        s.push_str(&format!(
            " messages={} cost={} hops_min={} hops_mean={:.3} hops_max={} links_created={} links_destroyed={} ledger_writes={}",
            self.messages,
            self.cost,
            self.hops_min,
            self.hops_mean,
            self.hops_max,
            self.links_created,
            self.links_destroyed,
            self.ledger_writes
        ));
        s
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line(Some(self.wall_us)))
    }
}
