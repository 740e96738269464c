//! Collectives over a [`Transport`]: recursive-doubling allreduce, gather, scatter.
//!
//! Every function is called concurrently by each participant with the same
//! arguments apart from `me` and its local data.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use crate::transport::{Block, Message, NodeId, PhaseKey, Source, Tag, Transport, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("group must have at least one member")]
    EmptyGroup,
    #[error("{0} appears twice in the group")]
    DuplicateMember(NodeId),
    #[error("{0} is not a member of the group")]
    NotMember(NodeId),
    #[error("group of {0} is a power of two; no surplus handling needed")]
    NotNeeded(usize),
    #[error("expected {expected} parts, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },
    #[error("cannot combine a sized buffer with a materialized tensor")]
    MixedBuffers,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CollectiveError> = std::result::Result<T, E>;

/// Data handed to a collective: either real values or just an element count
/// (count-profile runs).
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    Real(Tensor),
    Sized(u64),
}

impl Buffer {
    pub fn elements(&self) -> u64 {
        match self {
            Buffer::Real(t) => t.len() as u64,
            Buffer::Sized(n) => *n,
        }
    }

    pub fn tensor(&self) -> Option<&Tensor> {
        match self {
            Buffer::Real(t) => Some(t),
            Buffer::Sized(_) => None,
        }
    }

    pub fn into_tensor(self) -> Option<Tensor> {
        match self {
            Buffer::Real(t) => Some(t),
            Buffer::Sized(_) => None,
        }
    }

    /// Flattens `parts` into one rank-1 buffer. All parts must be the same kind.
    pub fn concat(parts: &[&Buffer]) -> Result<Buffer> {
        if parts.iter().all(|p| matches!(p, Buffer::Sized(_))) {
            return Ok(Buffer::Sized(parts.iter().map(|p| p.elements()).sum()));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.elements() as usize).sum());
        for p in parts {
            data.extend_from_slice(p.tensor().ok_or(CollectiveError::MixedBuffers)?.data());
        }
        Ok(Buffer::Real(Tensor::vector(data)))
    }

    /// Inverse of [`Buffer::concat`]: cuts `self` into pieces shaped like `like`.
    pub fn split_like(&self, like: &[&Buffer]) -> Result<Vec<Buffer>> {
        let total: u64 = like.iter().map(|p| p.elements()).sum();
        if total != self.elements() {
            return Err(TensorError::ShapeMismatch {
                expected: vec![total as usize],
                actual: self.shape(),
            }
            .into());
        }
        match self {
            Buffer::Sized(_) => Ok(like.iter().map(|p| Buffer::Sized(p.elements())).collect()),
            Buffer::Real(t) => {
                let mut out = Vec::with_capacity(like.len());
                let mut offset = 0;
                for p in like {
                    let n = p.elements() as usize;
                    let data = t.data()[offset..offset + n].to_vec();
                    offset += n;
                    out.push(Buffer::Real(Tensor::new(p.shape(), data)?));
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn message(&self, src: NodeId, dst: NodeId, ch: Channel) -> Message {
        let m = match self {
            Buffer::Real(t) => Message::tensor(src, dst, ch.tag, t),
            Buffer::Sized(n) => Message::sized(src, dst, ch.tag, *n),
        };
        m.in_phase(ch.phase).with_block(ch.block)
    }

    pub(crate) fn decode(msg: &Message, shape: &[usize]) -> Result<Buffer> {
        if msg.is_virtual() {
            Ok(Buffer::Sized(msg.payload_elements))
        } else {
            Ok(Buffer::Real(msg.to_tensor(shape)?))
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Buffer::Real(t) => t.shape().to_vec(),
            Buffer::Sized(n) => vec![*n as usize],
        }
    }

    /// `lo + hi`, elementwise.
    pub(crate) fn sum(lo: &Buffer, hi: &Buffer) -> Result<Buffer> {
        match (lo, hi) {
            (Buffer::Real(a), Buffer::Real(b)) => {
                let mut out = a.clone();
                out.add_assign(b)?;
                Ok(Buffer::Real(out))
            }
            (Buffer::Sized(a), Buffer::Sized(b)) if a == b => Ok(Buffer::Sized(*a)),
            (Buffer::Sized(a), Buffer::Sized(b)) => Err(TensorError::ShapeMismatch {
                expected: vec![*a as usize],
                actual: vec![*b as usize],
            }
            .into()),
            _ => Err(CollectiveError::MixedBuffers),
        }
    }
}

/// Tag, block and schedule position stamped on every message of a collective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    pub tag: Tag,
    pub block: Block,
    pub phase: PhaseKey,
}

impl Channel {
    pub fn new(tag: Tag, block: Block, phase: PhaseKey) -> Self {
        Self { tag, block, phase }
    }

    fn at_round(self, offset: u16) -> Self {
        Self {
            phase: self.phase.round(self.phase.round + offset),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    members: Vec<NodeId>,
    seed: u64,
}

impl Group {
    /// `seed` fixes the surplus selection for groups that are not a power of two.
    pub fn new(members: Vec<NodeId>, seed: u64) -> Result<Self> {
        if members.is_empty() {
            return Err(CollectiveError::EmptyGroup);
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].contains(m) {
                return Err(CollectiveError::DuplicateMember(*m));
            }
        }
        Ok(Self { members, seed })
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rank(&self, node: NodeId) -> Result<usize> {
        self.members
            .iter()
            .position(|&m| m == node)
            .ok_or(CollectiveError::NotMember(node))
    }
}

/// Exchange rounds for recursive doubling over `n` members.
pub fn rounds(n: usize) -> u32 {
    match n {
        0 | 1 => 0,
        n if n.is_power_of_two() => n.trailing_zeros(),
        n => n.ilog2() + 2,
    }
}

/// Folding plan for a group whose size is not a power of two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurplusPlan {
    /// Member ranks outside the power-of-two core, ascending.
    pub surplus: Vec<usize>,
    /// Member ranks that run recursive doubling, ascending.
    pub core: Vec<usize>,
    /// Surplus rank → the core rank it pre-sends to and gets the result from.
    pub donor: BTreeMap<usize, usize>,
}

/// Picks the surplus members and a distinct donor for each, uniformly at
/// random from the group's seed.
pub fn surplus_protocol(group: &Group) -> Result<SurplusPlan> {
    let n = group.len();
    if n.is_power_of_two() {
        return Err(CollectiveError::NotNeeded(n));
    }
    let core_n = 1usize << n.ilog2();
    let mut rng = ChaCha8Rng::seed_from_u64(group.seed);
    let mut surplus = sample(&mut rng, n, n - core_n).into_vec();
    surplus.sort_unstable();
    let core: Vec<usize> = (0..n).filter(|i| !surplus.contains(i)).collect();
    let picks = sample(&mut rng, core_n, surplus.len()).into_vec();
    let donor = surplus.iter().zip(picks).map(|(&s, p)| (s, core[p])).collect();
    Ok(SurplusPlan { surplus, core, donor })
}

fn exchange(
    t: &dyn Transport,
    me: NodeId,
    partner: NodeId,
    mine: &Buffer,
    ch: Channel,
) -> Result<Buffer> {
    t.send(mine.message(me, partner, ch))?;
    let msg = t.recv(me, ch.tag, Source::Node(partner))?;
    let theirs = Buffer::decode(&msg, &mine.shape())?;
    if theirs.elements() != mine.elements() {
        return Err(TensorError::ShapeMismatch {
            expected: mine.shape(),
            actual: theirs.shape(),
        }
        .into());
    }
    Ok(theirs)
}

/// Sum of every member's `local`, returned to every member.
///
/// Messages use rounds `ch.phase.round ..` up to [`rounds`]`(n)` of them.
/// Each pairwise combine adds the lower-ranked operand first, so all members
/// finish with bit-identical results.
pub fn allreduce_sum(t: &dyn Transport, group: &Group, me: NodeId, local: Buffer, ch: Channel) -> Result<Buffer> {
    let rank = group.rank(me)?;
    let n = group.len();
    if n == 1 {
        return Ok(local);
    }
    let (core, plan) = if n.is_power_of_two() {
        ((0..n).collect::<Vec<_>>(), None)
    } else {
        let p = surplus_protocol(group)?;
        (p.core.clone(), Some(p))
    };
    let m = |r: usize| group.members[r];
    let pre = u16::from(plan.is_some());
    let steps = core.len().trailing_zeros() as u16;

    if let Some(p) = &plan {
        if let Some(&d) = p.donor.get(&rank) {
            t.send(local.message(me, m(d), ch))?;
            let msg = t.recv(me, ch.tag, Source::Node(m(d)))?;
            return Buffer::decode(&msg, &local.shape());
        }
    }

    let mut acc = local;
    if let Some(p) = &plan {
        if let Some((&s, _)) = p.donor.iter().find(|(_, &d)| d == rank) {
            let msg = t.recv(me, ch.tag, Source::Node(m(s)))?;
            let theirs = Buffer::decode(&msg, &acc.shape())?;
            acc = if s < rank { Buffer::sum(&theirs, &acc)? } else { Buffer::sum(&acc, &theirs)? };
        }
    }

    let pos = core.iter().position(|&r| r == rank).expect("core member");
    for i in 0..steps {
        let partner_rank = core[pos ^ (1 << i)];
        let theirs = exchange(t, me, m(partner_rank), &acc, ch.at_round(pre + i))?;
        acc = if partner_rank < rank {
            Buffer::sum(&theirs, &acc)?
        } else {
            Buffer::sum(&acc, &theirs)?
        };
    }

    if let Some(p) = &plan {
        for (&s, &d) in &p.donor {
            if d == rank {
                t.send(acc.message(me, m(s), ch.at_round(pre + steps)))?;
            }
        }
    }
    Ok(acc)
}

/// Many-to-one: every member sends `local` to `root`; the root returns all
/// contributions labelled by source, in member order. `root` may be outside
/// the group. Non-root callers get an empty list.
pub fn gather(
    t: &dyn Transport,
    group: &Group,
    root: NodeId,
    me: NodeId,
    local: Option<Buffer>,
    shape: &[usize],
    ch: Channel,
) -> Result<Vec<(NodeId, Buffer)>> {
    let in_group = group.members.contains(&me);
    if !in_group && me != root {
        return Err(CollectiveError::NotMember(me));
    }
    let mut own = None;
    if in_group {
        let local = local.ok_or(CollectiveError::ArityMismatch { expected: 1, actual: 0 })?;
        if me == root {
            own = Some(local);
        } else {
            t.send(local.message(me, root, ch))?;
            return Ok(Vec::new());
        }
    }
    let mut out = Vec::with_capacity(group.len());
    for &src in &group.members {
        if src == root {
            out.push((src, own.take().expect("root's own contribution")));
        } else {
            let msg = t.recv(root, ch.tag, Source::Node(src))?;
            out.push((src, Buffer::decode(&msg, shape)?));
        }
    }
    Ok(out)
}

/// One-to-many: `root` sends `parts[i]` to member `i`; each member returns its
/// part. The root returns its own part if it is a member, otherwise `None`.
pub fn scatter(
    t: &dyn Transport,
    group: &Group,
    root: NodeId,
    me: NodeId,
    parts: Option<Vec<Buffer>>,
    shape: &[usize],
    ch: Channel,
) -> Result<Option<Buffer>> {
    if me == root {
        let parts = parts.ok_or(CollectiveError::ArityMismatch {
            expected: group.len(),
            actual: 0,
        })?;
        if parts.len() != group.len() {
            return Err(CollectiveError::ArityMismatch {
                expected: group.len(),
                actual: parts.len(),
            });
        }
        let mut own = None;
        for (&dst, part) in group.members.iter().zip(parts) {
            if dst == root {
                own = Some(part);
            } else {
                t.send(part.message(root, dst, ch))?;
            }
        }
        return Ok(own);
    }
    group.rank(me)?;
    let msg = t.recv(me, ch.tag, Source::Node(root))?;
    Ok(Some(Buffer::decode(&msg, shape)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_counts() {
        let expect = [(1, 0), (2, 1), (3, 3), (4, 2), (5, 4), (6, 4), (7, 4), (8, 3), (9, 5), (16, 4), (17, 6)];
        for (n, r) in expect {
            assert_eq!(rounds(n), r, "n={n}");
        }
    }

    #[test]
    fn surplus_sizes_and_distinct_donors() {
        for n in [3usize, 5, 6, 7, 9, 12, 33] {
            for seed in 0..5 {
                let g = Group::new((0..n as u32).map(NodeId::conv).collect(), seed).unwrap();
                let p = surplus_protocol(&g).unwrap();
                let core_n = 1 << n.ilog2();
                assert_eq!(p.surplus.len(), n - core_n);
                assert_eq!(p.core.len(), core_n);
                let mut donors: Vec<_> = p.donor.values().copied().collect();
                donors.sort_unstable();
                donors.dedup();
                assert_eq!(donors.len(), p.surplus.len());
                assert!(donors.iter().all(|d| p.core.contains(d)));
            }
        }
    }

    #[test]
    fn power_of_two_needs_no_surplus() {
        let g = Group::new((0..8).map(NodeId::conv).collect(), 0).unwrap();
        assert_eq!(surplus_protocol(&g), Err(CollectiveError::NotNeeded(8)));
    }

    #[test]
    fn group_rejects_duplicates() {
        let r = Group::new(vec![NodeId::conv(0), NodeId::conv(0)], 0);
        assert_eq!(r, Err(CollectiveError::DuplicateMember(NodeId::conv(0))));
        assert_eq!(Group::new(vec![], 0), Err(CollectiveError::EmptyGroup));
    }
}
