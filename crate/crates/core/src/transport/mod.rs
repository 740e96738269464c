//! Point-to-point messaging between logical nodes.
//!
//! Every transport records traffic in a shared [`Ledger`]. Time is logical:
//! the ledger converts the bytes moved in each barrier-delimited phase into
//! seconds from the configured per-node bandwidth ([`NetConfig`]).

mod ledger;
mod sim;
mod tcp;
pub mod wire;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, BYTES_PER_ELEMENT};

pub use ledger::{advance_clock, IterationTiming, Ledger, LedgerRow, LedgerSummary, RoundTiming, Transfer};
pub use sim::SimTransport;
pub use tcp::TcpTransport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("cluster has shut down")]
    ClusterShutDown,
    #[error("{dst} timed out after {timeout:?} waiting for {tag:?} from {from}")]
    Timeout {
        dst: NodeId,
        tag: Tag,
        from: Source,
        timeout: Duration,
    },
    #[error("payload of {bytes} bytes does not match {elements} elements")]
    BadPayload { bytes: usize, elements: u64 },
    #[error("message carries no tensor data")]
    VirtualPayload,
    #[error("wire format: {0}")]
    Wire(String),
    #[error("socket: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ConvWorker,
    FcWorker,
    PsServer,
    PsWorker,
    Controller,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Role> {
        [
            Role::ConvWorker,
            Role::FcWorker,
            Role::PsServer,
            Role::PsWorker,
            Role::Controller,
        ]
        .get(c as usize)
        .copied()
    }

    fn short(self) -> &'static str {
        match self {
            Role::ConvWorker => "conv",
            Role::FcWorker => "fc",
            Role::PsServer => "server",
            Role::PsWorker => "worker",
            Role::Controller => "ctrl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub role: Role,
    pub index: u32,
}

impl NodeId {
    pub const fn new(role: Role, index: u32) -> Self {
        Self { role, index }
    }

    pub const fn conv(i: u32) -> Self {
        Self::new(Role::ConvWorker, i)
    }

    pub const fn fc(i: u32) -> Self {
        Self::new(Role::FcWorker, i)
    }

    pub const fn server(i: u32) -> Self {
        Self::new(Role::PsServer, i)
    }

    pub const fn worker(i: u32) -> Self {
        Self::new(Role::PsWorker, i)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.short(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Activations,
    BoundaryGrads,
    GradPush,
    ParamPull,
    AllreduceChunk,
    Checkpoint,
    Control,
}

impl Tag {
    pub const ALL: [Tag; 7] = [
        Tag::Activations,
        Tag::BoundaryGrads,
        Tag::GradPush,
        Tag::ParamPull,
        Tag::AllreduceChunk,
        Tag::Checkpoint,
        Tag::Control,
    ];

    /// Tags whose payload is a flat `f32` tensor.
    pub fn carries_tensor(self) -> bool {
        !matches!(self, Tag::Checkpoint | Tag::Control)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Activations => "activations",
            Tag::BoundaryGrads => "boundary_grads",
            Tag::GradPush => "grad_push",
            Tag::ParamPull => "param_pull",
            Tag::AllreduceChunk => "allreduce_chunk",
            Tag::Checkpoint => "checkpoint",
            Tag::Control => "control",
        }
    }
}

/// Which part of the model a payload belongs to, for FC-Data accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Conv,
    Fc,
    #[default]
    Other,
}

/// Position of a transfer in the iteration schedule.
///
/// Stages run one after another. Within a stage, lanes run concurrently and
/// the rounds of each lane run one after another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct PhaseKey {
    pub iteration: u64,
    pub stage: u8,
    pub lane: u8,
    pub round: u16,
}

impl PhaseKey {
    pub fn new(iteration: u64, stage: u8) -> Self {
        Self {
            iteration,
            stage,
            lane: 0,
            round: 0,
        }
    }

    pub fn lane(self, lane: u8) -> Self {
        Self { lane, ..self }
    }

    pub fn round(self, round: u16) -> Self {
        Self { round, ..self }
    }
}

impl fmt::Display for PhaseKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "it{}/s{}/l{}/r{}", self.iteration, self.stage, self.lane, self.round)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Bytes(Vec<u8>),
    /// Size-only payload for count-profile runs; nothing is materialized.
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: Tag,
    pub block: Block,
    pub phase: PhaseKey,
    pub payload: Payload,
    pub payload_elements: u64,
}

/// Fixed per-message header size on the wire; never counted as payload.
pub const HEADER_BYTES: usize = 32;

impl Message {
    pub fn tensor(src: NodeId, dst: NodeId, tag: Tag, tensor: &Tensor) -> Self {
        Self {
            src,
            dst,
            tag,
            block: Block::Other,
            phase: PhaseKey::default(),
            payload_elements: tensor.len() as u64,
            payload: Payload::Bytes(tensor.to_le_bytes()),
        }
    }

    /// A tensor message that only carries its element count.
    pub fn sized(src: NodeId, dst: NodeId, tag: Tag, elements: u64) -> Self {
        Self {
            src,
            dst,
            tag,
            block: Block::Other,
            phase: PhaseKey::default(),
            payload_elements: elements,
            payload: Payload::Virtual,
        }
    }

    pub fn bytes(src: NodeId, dst: NodeId, tag: Tag, bytes: Vec<u8>) -> Self {
        Self {
            src,
            dst,
            tag,
            block: Block::Other,
            phase: PhaseKey::default(),
            payload_elements: 0,
            payload: Payload::Bytes(bytes),
        }
    }

    pub fn in_phase(mut self, phase: PhaseKey) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_block(mut self, block: Block) -> Self {
        self.block = block;
        self
    }

    pub fn payload_bytes(&self) -> u64 {
        match &self.payload {
            Payload::Bytes(b) => b.len() as u64,
            Payload::Virtual => self.payload_elements * BYTES_PER_ELEMENT as u64,
        }
    }

    pub fn wire_bytes(&self) -> u64 {
        self.payload_bytes() + HEADER_BYTES as u64
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self.payload, Payload::Virtual)
    }

    pub fn validate(&self) -> Result<()> {
        if let Payload::Bytes(b) = &self.payload {
            if self.tag.carries_tensor() && b.len() as u64 != self.payload_elements * BYTES_PER_ELEMENT as u64 {
                return Err(TransportError::BadPayload {
                    bytes: b.len(),
                    elements: self.payload_elements,
                });
            }
        }
        Ok(())
    }

    /// Decodes the payload as a tensor of the given shape.
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        match &self.payload {
            Payload::Bytes(b) => Ok(Tensor::from_le_bytes(shape, b)?),
            Payload::Virtual => Err(TransportError::VirtualPayload),
        }
    }

    pub fn raw(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::Bytes(b) => Ok(b),
            Payload::Virtual => Err(TransportError::VirtualPayload),
        }
    }
}

/// Sender filter for [`Transport::recv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Any,
    Node(NodeId),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Any => f.write_str("any"),
            Source::Node(n) => n.fmt(f),
        }
    }
}

impl From<NodeId> for Source {
    fn from(n: NodeId) -> Self {
        Source::Node(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Per-node bandwidth in bits per second.
    pub bandwidth_bps: f64,
    /// Added once to every round that moves at least one message.
    #[serde(default)]
    pub latency_s: f64,
    /// Send and receive directions are metered independently.
    #[serde(default = "yes")]
    pub full_duplex: bool,
}

fn yes() -> bool {
    true
}

impl NetConfig {
    pub fn new(bandwidth_bps: f64) -> Self {
        Self {
            bandwidth_bps,
            latency_s: 0.0,
            full_duplex: true,
        }
    }

    pub fn gbps(g: f64) -> Self {
        Self::new(g * 1e9)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(format!("bandwidth {} must be positive", self.bandwidth_bps));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(format!("latency {} must be non-negative", self.latency_s));
        }
        Ok(())
    }
}

/// Message passing between registered nodes. Implementations must allow
/// concurrent `send`/`recv` from every node thread.
pub trait Transport: Send + Sync {
    /// Enqueues a message without blocking.
    fn send(&self, msg: Message) -> Result<()>;

    /// Blocks until a message for `dst` with `tag` from `from` arrives, and
    /// returns the earliest such message exactly once.
    fn recv(&self, dst: NodeId, tag: Tag, from: Source) -> Result<Message>;

    /// Wakes all blocked receivers with [`TransportError::ClusterShutDown`].
    fn shutdown(&self);

    fn ledger(&self) -> &Ledger;

    fn nodes(&self) -> Vec<NodeId>;

    fn net(&self) -> NetConfig;
}

pub(crate) fn default_timeout() -> Duration {
    Duration::from_secs(60)
}
