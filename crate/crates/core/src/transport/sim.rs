use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{default_timeout, Ledger, Message, NetConfig, NodeId, Result, Source, Tag, Transport, TransportError};

#[derive(Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Message>>,
    ready: Condvar,
}

/// Per-node FIFO queues with blocking, filtered receive. Shared by both transports.
pub(super) struct Mailboxes {
    boxes: BTreeMap<NodeId, Mailbox>,
    down: AtomicBool,
    pub(super) timeout: Duration,
}

impl Mailboxes {
    pub(super) fn new(nodes: &[NodeId]) -> Self {
        Self {
            boxes: nodes.iter().map(|&n| (n, Mailbox::default())).collect(),
            down: AtomicBool::new(false),
            timeout: default_timeout(),
        }
    }

    pub(super) fn check(&self, node: NodeId) -> Result<()> {
        if self.boxes.contains_key(&node) {
            Ok(())
        } else {
            Err(TransportError::UnknownNode(node))
        }
    }

    pub(super) fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    pub(super) fn deliver(&self, msg: Message) -> Result<()> {
        let mb = self.boxes.get(&msg.dst).ok_or(TransportError::UnknownNode(msg.dst))?;
        mb.queue.lock().unwrap_or_else(|e| e.into_inner()).push_back(msg);
        mb.ready.notify_all();
        Ok(())
    }

    pub(super) fn take(&self, dst: NodeId, tag: Tag, from: Source) -> Result<Message> {
        let mb = self.boxes.get(&dst).ok_or(TransportError::UnknownNode(dst))?;
        let deadline = Instant::now() + self.timeout;
        let mut q = mb.queue.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let hit = q.iter().position(|m| {
                m.tag == tag
                    && match from {
                        Source::Any => true,
                        Source::Node(n) => m.src == n,
                    }
            });
            if let Some(i) = hit {
                return Ok(q.remove(i).expect("index from position"));
            }
            if self.is_down() {
                return Err(TransportError::ClusterShutDown);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout {
                    dst,
                    tag,
                    from,
                    timeout: self.timeout,
                });
            }
            q = mb
                .ready
                .wait_timeout(q, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub(super) fn pending(&self, node: NodeId) -> usize {
        self.boxes
            .get(&node)
            .map(|b| b.queue.lock().unwrap_or_else(|e| e.into_inner()).len())
            .unwrap_or(0)
    }

    pub(super) fn shutdown(&self) {
        self.down.store(true, Ordering::SeqCst);
        for mb in self.boxes.values() {
            let _g = mb.queue.lock().unwrap_or_else(|e| e.into_inner());
            mb.ready.notify_all();
        }
    }

    pub(super) fn nodes(&self) -> Vec<NodeId> {
        self.boxes.keys().copied().collect()
    }
}

/// In-process network: one FIFO mailbox per node.
pub struct SimTransport {
    boxes: Mailboxes,
    ledger: Ledger,
}

impl SimTransport {
    pub fn new(nodes: &[NodeId], net: NetConfig) -> Self {
        Self {
            boxes: Mailboxes::new(nodes),
            ledger: Ledger::new(net),
        }
    }

    /// How long `recv` waits before giving up.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.boxes.timeout = timeout;
        self
    }

    /// Messages queued for `node` and not yet received.
    pub fn pending(&self, node: NodeId) -> usize {
        self.boxes.pending(node)
    }
}

impl Transport for SimTransport {
    fn send(&self, msg: Message) -> Result<()> {
        if self.boxes.is_down() {
            return Err(TransportError::ClusterShutDown);
        }
        self.boxes.check(msg.src)?;
        self.boxes.check(msg.dst)?;
        msg.validate()?;
        self.ledger.record_send(&msg);
        self.boxes.deliver(msg)
    }

    fn recv(&self, dst: NodeId, tag: Tag, from: Source) -> Result<Message> {
        let msg = self.boxes.take(dst, tag, from)?;
        self.ledger.record_recv(&msg);
        Ok(msg)
    }

    fn shutdown(&self) {
        self.boxes.shutdown();
    }

    fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.boxes.nodes()
    }

    fn net(&self) -> NetConfig {
        self.ledger.net()
    }
}
