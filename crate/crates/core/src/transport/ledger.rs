use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Block, Message, NetConfig, NodeId, PhaseKey, Tag};

/// One message as seen by the ledger.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Transfer {
    pub phase: PhaseKey,
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: Tag,
    pub block: Block,
    pub payload_bytes: u64,
}

impl Transfer {
    fn of(msg: &Message) -> Self {
        Self {
            phase: msg.phase,
            src: msg.src,
            dst: msg.dst,
            tag: msg.tag,
            block: msg.block,
            payload_bytes: msg.payload_bytes(),
        }
    }

    /// Checkpoint copies are shipped in the background and never cost clock time.
    fn timed(&self) -> bool {
        self.tag != Tag::Checkpoint
    }
}

/// Duration of one barrier-delimited round of concurrent transfers.
///
/// Each node's time is its injected compute plus its serialized traffic:
/// `max(send, recv) * 8 / B` for full duplex, `(send + recv) * 8 / B`
/// otherwise. The round lasts as long as its slowest node, plus one latency if
/// any message moved.
pub fn advance_clock(transfers: &[Transfer], compute: &[(NodeId, f64)], net: &NetConfig) -> f64 {
    let mut sent: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut recv: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut busy: BTreeMap<NodeId, f64> = BTreeMap::new();
    for t in transfers {
        *sent.entry(t.src).or_default() += t.payload_bytes;
        *recv.entry(t.dst).or_default() += t.payload_bytes;
    }
    for &(node, secs) in compute {
        *busy.entry(node).or_default() += secs;
    }
    let nodes: std::collections::BTreeSet<NodeId> =
        sent.keys().chain(recv.keys()).chain(busy.keys()).copied().collect();
    let mut elapsed = 0.0f64;
    for node in nodes {
        let s = sent.get(&node).copied().unwrap_or(0) as f64 * 8.0 / net.bandwidth_bps;
        let r = recv.get(&node).copied().unwrap_or(0) as f64 * 8.0 / net.bandwidth_bps;
        let comm = if net.full_duplex { s.max(r) } else { s + r };
        elapsed = elapsed.max(busy.get(&node).copied().unwrap_or(0.0) + comm);
    }
    if !transfers.is_empty() {
        elapsed += net.latency_s;
    }
    elapsed
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTiming {
    pub round: u16,
    pub elapsed: f64,
    pub transfers: usize,
    /// Largest per-node payload in either direction.
    pub bottleneck_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneTiming {
    pub lane: u8,
    pub elapsed: f64,
    pub rounds: Vec<RoundTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: u8,
    pub elapsed: f64,
    pub lanes: Vec<LaneTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTiming {
    pub iteration: u64,
    pub elapsed: f64,
    pub stages: Vec<StageTiming>,
    /// Payload bytes of tensor traffic, excluding checkpoints.
    pub payload_bytes: u64,
    /// The part of `payload_bytes` that updates the FC block.
    pub fc_bytes: u64,
    pub bytes_by_tag: BTreeMap<Tag, u64>,
}

impl IterationTiming {
    pub fn stage(&self, stage: u8) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn lane(&self, stage: u8, lane: u8) -> Option<&LaneTiming> {
        self.stage(stage)?.lanes.iter().find(|l| l.lane == lane)
    }
}

/// One CSV row per transfer (and per injected compute interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub phase: String,
    pub src: String,
    pub dst: String,
    pub tag: String,
    pub bytes: u64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeTotals {
    pub sent_bytes: u64,
    pub received_bytes: u64,
    pub sent_messages: u64,
    pub received_messages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub clock_s: f64,
    pub iterations: usize,
    pub per_node: BTreeMap<String, NodeTotals>,
    pub messages_by_tag: BTreeMap<String, u64>,
    pub bytes_by_tag: BTreeMap<String, u64>,
    pub total_payload_bytes: u64,
    pub total_wire_bytes: u64,
}

#[derive(Default)]
struct Inner {
    pending: Vec<Transfer>,
    pending_compute: Vec<(PhaseKey, NodeId, f64)>,
    link_bytes: BTreeMap<(NodeId, NodeId), u64>,
    nodes: BTreeMap<NodeId, NodeTotals>,
    wire_sent: u64,
    wire_received: u64,
    messages_by_tag: BTreeMap<Tag, u64>,
    bytes_by_tag: BTreeMap<Tag, u64>,
    clock: f64,
    rows: Vec<LedgerRow>,
    iterations: Vec<IterationTiming>,
}

/// Thread-safe traffic counters plus the logical clock.
pub struct Ledger {
    net: NetConfig,
    inner: Mutex<Inner>,
}

impl Ledger {
    pub fn new(net: NetConfig) -> Self {
        Self {
            net,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn net(&self) -> NetConfig {
        self.net
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn record_send(&self, msg: &Message) {
        let mut g = self.lock();
        let t = Transfer::of(msg);
        *g.link_bytes.entry((t.src, t.dst)).or_default() += t.payload_bytes;
        let n = g.nodes.entry(t.src).or_default();
        n.sent_bytes += msg.wire_bytes();
        n.sent_messages += 1;
        g.wire_sent += msg.wire_bytes();
        *g.messages_by_tag.entry(t.tag).or_default() += 1;
        *g.bytes_by_tag.entry(t.tag).or_default() += t.payload_bytes;
        g.pending.push(t);
    }

    pub(crate) fn record_recv(&self, msg: &Message) {
        let mut g = self.lock();
        let n = g.nodes.entry(msg.dst).or_default();
        n.received_bytes += msg.wire_bytes();
        n.received_messages += 1;
        g.wire_received += msg.wire_bytes();
    }

    /// Charges `seconds` of computation to `node` in the given round.
    pub fn record_compute(&self, node: NodeId, phase: PhaseKey, seconds: f64) {
        if seconds > 0.0 {
            self.lock().pending_compute.push((phase, node, seconds));
        }
    }

    /// Closes `iteration` at its barrier: times every round recorded for it,
    /// advances the clock, and returns the breakdown.
    ///
    /// Rounds within a lane add up, concurrent lanes of a stage take the
    /// maximum, and stages add up.
    pub fn close_iteration(&self, iteration: u64) -> IterationTiming {
        let mut g = self.lock();
        let (mut mine, rest): (Vec<Transfer>, Vec<Transfer>) =
            g.pending.drain(..).partition(|t| t.phase.iteration == iteration);
        g.pending = rest;
        let (compute, rest): (Vec<_>, Vec<_>) =
            g.pending_compute.drain(..).partition(|c| c.0.iteration == iteration);
        g.pending_compute = rest;
        mine.sort();

        type RoundKey = (u8, u8, u16);
        let mut rounds: BTreeMap<RoundKey, (Vec<Transfer>, Vec<(NodeId, f64)>)> = BTreeMap::new();
        for t in &mine {
            if t.timed() {
                let k = (t.phase.stage, t.phase.lane, t.phase.round);
                rounds.entry(k).or_default().0.push(t.clone());
            }
        }
        let mut compute = compute;
        compute.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        for &(p, node, secs) in &compute {
            rounds.entry((p.stage, p.lane, p.round)).or_default().1.push((node, secs));
        }

        let mut stages: Vec<StageTiming> = Vec::new();
        let mut round_elapsed: BTreeMap<RoundKey, f64> = BTreeMap::new();
        for (&(stage, lane, round), (ts, cs)) in &rounds {
            let elapsed = advance_clock(ts, cs, &self.net);
            round_elapsed.insert((stage, lane, round), elapsed);
            let mut sent: BTreeMap<NodeId, u64> = BTreeMap::new();
            let mut recv: BTreeMap<NodeId, u64> = BTreeMap::new();
            for t in ts {
                *sent.entry(t.src).or_default() += t.payload_bytes;
                *recv.entry(t.dst).or_default() += t.payload_bytes;
            }
            let bottleneck_bytes = sent.values().chain(recv.values()).copied().max().unwrap_or(0);
            let rt = RoundTiming {
                round,
                elapsed,
                transfers: ts.len(),
                bottleneck_bytes,
            };
            if stages.last().map(|s| s.stage) != Some(stage) {
                stages.push(StageTiming {
                    stage,
                    elapsed: 0.0,
                    lanes: Vec::new(),
                });
            }
            let st = stages.last_mut().unwrap();
            if st.lanes.last().map(|l| l.lane) != Some(lane) {
                st.lanes.push(LaneTiming {
                    lane,
                    elapsed: 0.0,
                    rounds: Vec::new(),
                });
            }
            let ln = st.lanes.last_mut().unwrap();
            ln.elapsed += elapsed;
            ln.rounds.push(rt);
        }
        let mut total = 0.0;
        for st in &mut stages {
            st.elapsed = st.lanes.iter().map(|l| l.elapsed).fold(0.0, f64::max);
            total += st.elapsed;
        }
        g.clock += total;

        let mut payload_bytes = 0;
        let mut fc_bytes = 0;
        let mut bytes_by_tag: BTreeMap<Tag, u64> = BTreeMap::new();
        for t in &mine {
            *bytes_by_tag.entry(t.tag).or_default() += t.payload_bytes;
            if t.tag.carries_tensor() {
                payload_bytes += t.payload_bytes;
                if t.block == Block::Fc {
                    fc_bytes += t.payload_bytes;
                }
            }
        }
        for t in &mine {
            let key = (t.phase.stage, t.phase.lane, t.phase.round);
            g.rows.push(LedgerRow {
                phase: t.phase.to_string(),
                src: t.src.to_string(),
                dst: t.dst.to_string(),
                tag: t.tag.name().to_string(),
                bytes: t.payload_bytes,
                elapsed_s: if t.timed() { round_elapsed[&key] } else { 0.0 },
            });
        }
        for &(p, node, secs) in &compute {
            g.rows.push(LedgerRow {
                phase: p.to_string(),
                src: node.to_string(),
                dst: node.to_string(),
                tag: "compute".into(),
                bytes: 0,
                elapsed_s: secs,
            });
        }
        let timing = IterationTiming {
            iteration,
            elapsed: total,
            stages,
            payload_bytes,
            fc_bytes,
            bytes_by_tag,
        };
        g.iterations.push(timing.clone());
        timing
    }

    pub fn clock(&self) -> f64 {
        self.lock().clock
    }

    pub fn iterations(&self) -> Vec<IterationTiming> {
        self.lock().iterations.clone()
    }

    pub fn link_bytes(&self, src: NodeId, dst: NodeId) -> u64 {
        self.lock().link_bytes.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn node_totals(&self, node: NodeId) -> NodeTotals {
        self.lock().nodes.get(&node).cloned().unwrap_or_default()
    }

    /// Wire bytes (payload plus headers) sent and received across all nodes.
    pub fn wire_totals(&self) -> (u64, u64) {
        let g = self.lock();
        (g.wire_sent, g.wire_received)
    }

    pub fn messages(&self, tag: Tag) -> u64 {
        self.lock().messages_by_tag.get(&tag).copied().unwrap_or(0)
    }

    pub fn tag_bytes(&self, tag: Tag) -> u64 {
        self.lock().bytes_by_tag.get(&tag).copied().unwrap_or(0)
    }

    pub fn rows(&self) -> Vec<LedgerRow> {
        self.lock().rows.clone()
    }

    pub fn summary(&self) -> LedgerSummary {
        let g = self.lock();
        LedgerSummary {
            clock_s: g.clock,
            iterations: g.iterations.len(),
            per_node: g.nodes.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            messages_by_tag: g.messages_by_tag.iter().map(|(k, v)| (k.name().into(), *v)).collect(),
            bytes_by_tag: g.bytes_by_tag.iter().map(|(k, v)| (k.name().into(), *v)).collect(),
            total_payload_bytes: g.bytes_by_tag.values().sum(),
            total_wire_bytes: g.wire_sent,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.lock().rows.iter() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::Role;

    fn t(src: NodeId, dst: NodeId, bytes: u64) -> Transfer {
        Transfer {
            phase: PhaseKey::default(),
            src,
            dst,
            tag: Tag::GradPush,
            block: Block::Other,
            payload_bytes: bytes,
        }
    }

    #[test]
    fn one_megabyte_at_eight_megabit() {
        let net = NetConfig::new(8e6);
        let a = NodeId::new(Role::PsWorker, 0);
        let b = NodeId::new(Role::PsServer, 0);
        assert_eq!(advance_clock(&[t(a, b, 1_000_000)], &[], &net), 1.0);
    }

    #[test]
    fn disjoint_pairs_run_in_parallel() {
        let net = NetConfig::new(8e6);
        let one = [t(NodeId::worker(0), NodeId::worker(1), 500_000)];
        let two = [one[0].clone(), t(NodeId::worker(2), NodeId::worker(3), 500_000)];
        assert_eq!(advance_clock(&one, &[], &net), advance_clock(&two, &[], &net));
    }

    #[test]
    fn half_duplex_adds_directions() {
        let mut net = NetConfig::new(8e6);
        let ts = [
            t(NodeId::worker(0), NodeId::worker(1), 1_000_000),
            t(NodeId::worker(1), NodeId::worker(0), 1_000_000),
        ];
        assert_eq!(advance_clock(&ts, &[], &net), 1.0);
        net.full_duplex = false;
        assert_eq!(advance_clock(&ts, &[], &net), 2.0);
    }

    #[test]
    fn latency_only_when_messages_move() {
        let mut net = NetConfig::new(8e6);
        net.latency_s = 0.25;
        assert_eq!(advance_clock(&[], &[(NodeId::worker(0), 1.0)], &net), 1.0);
        assert_eq!(advance_clock(&[t(NodeId::worker(0), NodeId::worker(1), 0)], &[], &net), 0.25);
    }
}
