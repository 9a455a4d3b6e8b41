//! Round-synchronized peer state exchange.
//!
//! Every peer broadcasts its state for round 0, then loops: a `State`
//! message is stored, a `RoundComplete` marks its sender done. Once a state
//! from every peer is present the local node update runs, the collected
//! states are cleared and the peer broadcasts `RoundComplete`. The round
//! ends when every peer has completed it, or early when a `State` from the
//! next round shows that the others already moved on. Ending a round
//! broadcasts the new state stamped with the next round number.
//!
//! [`ProtocolState`] is the event-driven state machine, [`run_rounds`] drives
//! it over any [`Transport`], and [`SimNetwork`] runs many peers under one
//! seeded scheduler.

use alloc::vec;
use alloc::vec::Vec;

use crate::bnn::Architecture;
use crate::consensus::StateVector;
use crate::rng::{below, SeedStream};

pub type PeerId = u32;

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    State(StateVector),
    RoundComplete { fingerprint: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeerMessage {
    pub sender: PeerId,
    pub round: u32,
    pub body: Body,
}

impl PeerMessage {
    pub fn state(sender: PeerId, round: u32, state: StateVector) -> Self {
        Self { sender, round, body: Body::State(state) }
    }

    pub fn round_complete(sender: PeerId, round: u32, fingerprint: u64) -> Self {
        Self { sender, round, body: Body::RoundComplete { fingerprint } }
    }

    pub fn fingerprint(&self) -> u64 {
        match &self.body {
            Body::State(s) => s.fingerprint,
            Body::RoundComplete { fingerprint } => *fingerprint,
        }
    }

    pub fn is_state(&self) -> bool {
        matches!(self.body, Body::State(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("need at least two peers, got {0}")]
    TooFewPeers(usize),
    #[error("message from unknown peer {sender} (peers 0..{peers})")]
    UnknownPeer { sender: PeerId, peers: usize },
    #[error("peer {0} received its own message")]
    SelfMessage(PeerId),
    #[error("fingerprint mismatch from peer {sender}: expected {expected:#018x}, got {got:#018x}")]
    Fingerprint { sender: PeerId, expected: u64, got: u64 },
    #[error("state from peer {sender} for round {round} arrived after that round was used")]
    StaleState { sender: PeerId, round: u32 },
    #[error("duplicate state from peer {sender} for round {round}")]
    DuplicateState { sender: PeerId, round: u32 },
}

/// Condensed view of a [`ProtocolState`] attached to fatal errors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub id: PeerId,
    pub round: u32,
    pub max_round: u32,
    pub peer_complete: Vec<bool>,
    pub has_state: Vec<bool>,
    pub buffered: usize,
}

impl core::fmt::Display for Snapshot {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "peer {} at round {}/{}, complete {:?}, states {:?}, buffered {}",
            self.id, self.round, self.max_round, self.peer_complete, self.has_state, self.buffered
        )
    }
}

/// Local protocol state of one peer.
#[derive(Clone, Debug)]
pub struct ProtocolState {
    pub id: PeerId,
    pub round: u32,
    pub max_round: u32,
    pub peer_complete: Vec<bool>,
    pub peer_state: Vec<Option<StateVector>>,
    pub own_state: StateVector,
    /// Messages from rounds this peer has not reached, replayed after the
    /// next round change.
    buffered: Vec<PeerMessage>,
    updates: u32,
}

impl ProtocolState {
    pub fn new(id: PeerId, n_peers: usize, max_round: u32, state: StateVector) -> Result<Self, ProtocolError> {
        if n_peers < 2 {
            return Err(ProtocolError::TooFewPeers(n_peers));
        }
        if id as usize >= n_peers {
            return Err(ProtocolError::UnknownPeer { sender: id, peers: n_peers });
        }
        let mut peer_state = vec![None; n_peers];
        peer_state[id as usize] = Some(state.clone());
        Ok(Self {
            id,
            round: 0,
            max_round,
            peer_complete: vec![false; n_peers],
            peer_state,
            own_state: state,
            buffered: Vec::new(),
            updates: 0,
        })
    }

    pub fn n_peers(&self) -> usize {
        self.peer_complete.len()
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.max_round
    }

    /// Node updates executed so far.
    pub fn updates(&self) -> u32 {
        self.updates
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            id: self.id,
            round: self.round,
            max_round: self.max_round,
            peer_complete: self.peer_complete.clone(),
            has_state: self.peer_state.iter().map(Option::is_some).collect(),
            buffered: self.buffered.len(),
        }
    }

    /// The initial broadcast; empty when there are no rounds to run.
    pub fn start(&self) -> Vec<PeerMessage> {
        if self.is_done() {
            return Vec::new();
        }
        vec![PeerMessage::state(self.id, 0, self.own_state.clone())]
    }

    /// Processes one received message and returns the messages to
    /// broadcast. `node_update(round, states)` gets every peer's state in
    /// id order, this peer's included.
    pub fn handle<E, F>(&mut self, msg: PeerMessage, node_update: &mut F) -> Result<Vec<PeerMessage>, HandleError<E>>
    where
        F: FnMut(u32, &[&StateVector]) -> Result<StateVector, E>,
    {
        self.validate(&msg)?;
        let mut out = Vec::new();
        self.dispatch(msg, node_update, &mut out)?;
        Ok(out)
    }

    fn validate(&self, msg: &PeerMessage) -> Result<(), ProtocolError> {
        let n = self.n_peers();
        if msg.sender as usize >= n {
            return Err(ProtocolError::UnknownPeer { sender: msg.sender, peers: n });
        }
        if msg.sender == self.id {
            return Err(ProtocolError::SelfMessage(self.id));
        }
        if msg.fingerprint() != self.own_state.fingerprint {
            return Err(ProtocolError::Fingerprint {
                sender: msg.sender,
                expected: self.own_state.fingerprint,
                got: msg.fingerprint(),
            });
        }
        Ok(())
    }

    fn dispatch<E, F>(&mut self, msg: PeerMessage, node_update: &mut F, out: &mut Vec<PeerMessage>) -> Result<(), HandleError<E>>
    where
        F: FnMut(u32, &[&StateVector]) -> Result<StateVector, E>,
    {
        if self.is_done() {
            return Ok(());
        }
        let sender = msg.sender as usize;
        match msg.body {
            Body::RoundComplete { .. } => {
                if msg.round > self.round {
                    self.buffered.push(msg);
                    return Ok(());
                }
                if msg.round < self.round {
                    // Completion of a round this peer already left.
                    return Ok(());
                }
                self.peer_complete[sender] = true;
            }
            Body::State(state) => {
                if msg.round < self.round {
                    return Err(ProtocolError::StaleState { sender: msg.sender, round: msg.round }.into());
                }
                if msg.round > self.round + 1 {
                    self.buffered.push(PeerMessage { body: Body::State(state), ..msg });
                    return Ok(());
                }
                if msg.round > self.round {
                    self.finish_round(node_update, out)?;
                    if self.is_done() {
                        return Ok(());
                    }
                }
                if self.peer_state[sender].is_some() {
                    return Err(ProtocolError::DuplicateState { sender: msg.sender, round: msg.round }.into());
                }
                self.peer_state[sender] = Some(state);
            }
        }
        if self.peer_state.iter().all(Option::is_some) {
            let refs: Vec<&StateVector> = self.peer_state.iter().flatten().collect();
            let next = node_update(self.round, &refs).map_err(HandleError::Update)?;
            self.updates += 1;
            self.peer_state.iter_mut().for_each(|s| *s = None);
            self.own_state = next;
            self.peer_complete[self.id as usize] = true;
            self.peer_state[self.id as usize] = Some(self.own_state.clone());
            out.push(PeerMessage::round_complete(self.id, self.round, self.own_state.fingerprint));
        }
        if self.peer_complete.iter().all(|&c| c) {
            self.finish_round(node_update, out)?;
        }
        Ok(())
    }

    /// Clears completion flags, advances the round and broadcasts the
    /// current state for it; then replays buffered messages.
    fn finish_round<E, F>(&mut self, node_update: &mut F, out: &mut Vec<PeerMessage>) -> Result<(), HandleError<E>>
    where
        F: FnMut(u32, &[&StateVector]) -> Result<StateVector, E>,
    {
        self.peer_complete.iter_mut().for_each(|c| *c = false);
        self.round += 1;
        if self.is_done() {
            return Ok(());
        }
        out.push(PeerMessage::state(self.id, self.round, self.own_state.clone()));
        let pending = core::mem::take(&mut self.buffered);
        for m in pending {
            self.dispatch(m, node_update, out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HandleError<E> {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("node update failed: {0}")]
    Update(E),
}

/// Message carrier between peers.
pub trait Transport {
    type Error;
    /// Sends `msg` to every other peer.
    fn broadcast(&mut self, msg: &PeerMessage) -> Result<(), Self::Error>;
    /// Blocks until a message arrives or the transport's deadline passes.
    fn receive(&mut self) -> Result<PeerMessage, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError<T, E> {
    #[error("transport failure ({snapshot}): {source}")]
    Transport { source: T, snapshot: Snapshot },
    #[error("protocol violation ({snapshot}): {source}")]
    Protocol { source: ProtocolError, snapshot: Snapshot },
    #[error("node update failed: {0}")]
    Update(E),
}

/// Runs the exchange until `max_round` rounds are complete and returns the
/// final local state.
pub fn run_rounds<T, E, F>(ps: &mut ProtocolState, transport: &mut T, mut node_update: F) -> Result<StateVector, RunError<T::Error, E>>
where
    T: Transport,
    F: FnMut(u32, &[&StateVector]) -> Result<StateVector, E>,
{
    let send = |t: &mut T, ps: &ProtocolState, msgs: &[PeerMessage]| -> Result<(), RunError<T::Error, E>> {
        for m in msgs {
            t.broadcast(m).map_err(|source| RunError::Transport { source, snapshot: ps.snapshot() })?;
        }
        Ok(())
    };
    send(transport, ps, &ps.start())?;
    while !ps.is_done() {
        let msg = transport
            .receive()
            .map_err(|source| RunError::Transport { source, snapshot: ps.snapshot() })?;
        let out = ps.handle(msg, &mut node_update).map_err(|e| match e {
            HandleError::Protocol(source) => RunError::Protocol { source, snapshot: ps.snapshot() },
            HandleError::Update(e) => RunError::Update(e),
        })?;
        send(transport, ps, &out)?;
    }
    Ok(ps.own_state.clone())
}

// ---------------------------------------------------------------------------
// Wire format

pub const MAGIC: [u8; 4] = *b"PSX1";
/// Frame header: magic, kind, sender, round, fingerprint, payload length.
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8 + 4;

const KIND_STATE: u8 = 0;
const KIND_ROUND_COMPLETE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated frame: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("fingerprint mismatch: expected {expected:#018x}, got {got:#018x}")]
    Fingerprint { expected: u64, got: u64 },
    #[error("payload of {got} floats does not match the expected {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("state of {0} floats does not fit a frame")]
    TooLarge(usize),
}

/// Expected state layout on the receiving side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WireLayout {
    pub fingerprint: u64,
    pub mu_len: usize,
    pub rho_len: usize,
}

impl WireLayout {
    pub fn of(arch: &Architecture) -> Self {
        Self {
            fingerprint: arch.fingerprint(),
            mu_len: arch.mu_len(),
            rho_len: arch.rho_len(),
        }
    }
}

/// Header fields of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: u8,
    pub sender: PeerId,
    pub round: u32,
    pub fingerprint: u64,
    pub payload_len: u32,
}

impl FrameHeader {
    /// Total frame size including the header.
    pub fn frame_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload_len as usize
    }
}

pub fn wire_encode(msg: &PeerMessage) -> Result<Vec<u8>, WireError> {
    let (kind, payload): (u8, Option<&StateVector>) = match &msg.body {
        Body::State(s) => (KIND_STATE, Some(s)),
        Body::RoundComplete { .. } => (KIND_ROUND_COMPLETE, None),
    };
    let n = payload.map_or(0, |s| s.mu.len() + s.rho.len());
    let len = u32::try_from(n).map_err(|_| WireError::TooLarge(n))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n);
    buf.extend_from_slice(&MAGIC);
    buf.push(kind);
    buf.extend_from_slice(&msg.sender.to_le_bytes());
    buf.extend_from_slice(&msg.round.to_le_bytes());
    buf.extend_from_slice(&msg.fingerprint().to_le_bytes());
    buf.extend_from_slice(&len.to_le_bytes());
    if let Some(s) = payload {
        for v in s.mu.iter().chain(&s.rho) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn array<const N: usize>(b: &[u8], at: usize) -> [u8; N] {
    let mut a = [0u8; N];
    a.copy_from_slice(&b[at..at + N]);
    a
}

pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, got: bytes.len() });
    }
    let magic = array::<4>(bytes, 0);
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let kind = bytes[4];
    if kind != KIND_STATE && kind != KIND_ROUND_COMPLETE {
        return Err(WireError::BadKind(kind));
    }
    Ok(FrameHeader {
        kind,
        sender: u32::from_le_bytes(array(bytes, 5)),
        round: u32::from_le_bytes(array(bytes, 9)),
        fingerprint: u64::from_le_bytes(array(bytes, 13)),
        payload_len: u32::from_le_bytes(array(bytes, 21)),
    })
}

/// Decodes exactly one frame.
pub fn wire_decode(bytes: &[u8], layout: &WireLayout) -> Result<PeerMessage, WireError> {
    let h = decode_header(bytes)?;
    if h.fingerprint != layout.fingerprint {
        return Err(WireError::Fingerprint { expected: layout.fingerprint, got: h.fingerprint });
    }
    let expected = if h.kind == KIND_STATE { layout.mu_len + layout.rho_len } else { 0 };
    if h.payload_len as usize != expected {
        return Err(WireError::PayloadLength { expected, got: h.payload_len as usize });
    }
    let total = h.frame_len();
    if bytes.len() < total {
        return Err(WireError::Truncated { needed: total, got: bytes.len() });
    }
    if bytes.len() > total {
        return Err(WireError::Trailing(bytes.len() - total));
    }
    if h.kind == KIND_ROUND_COMPLETE {
        return Ok(PeerMessage::round_complete(h.sender, h.round, h.fingerprint));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(array(c, 0)))
        .collect();
    let rho = floats[layout.mu_len..].to_vec();
    let mut mu = floats;
    mu.truncate(layout.mu_len);
    Ok(PeerMessage::state(h.sender, h.round, StateVector { mu, rho, fingerprint: h.fingerprint }))
}

// ---------------------------------------------------------------------------
// Deterministic in-memory network

/// Delivery order of in-flight messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Global send order.
    Fifo,
    /// Each message is delayed by a uniform number of steps in `0..=max_delay`.
    RandomDelay { max_delay: u32 },
    /// Any in-flight message may be delivered next.
    Arbitrary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InFlight {
    pub to: PeerId,
    pub msg: PeerMessage,
    seq: u64,
    due: u64,
}

/// One delivered message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub from: PeerId,
    pub to: PeerId,
    pub round: u32,
    pub state: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError<E> {
    #[error("no message in flight but peers unfinished: {0:?}")]
    Deadlock(Vec<Snapshot>),
    #[error("round skew {skew} exceeds 1 after {step} deliveries")]
    Skew { skew: u32, step: usize },
    #[error("peer {peer}: {source}")]
    Handle { peer: PeerId, source: HandleError<E> },
}

/// All peers of one exchange driven by a seeded scheduler.
#[derive(Clone, Debug)]
pub struct SimNetwork {
    pub peers: Vec<ProtocolState>,
    in_flight: Vec<InFlight>,
    schedule: Schedule,
    rng: rand_chacha::ChaCha8Rng,
    seq: u64,
    clock: u64,
    pub trace: Vec<TraceEvent>,
    pub max_skew: u32,
    started: bool,
}

impl SimNetwork {
    pub fn new(states: Vec<StateVector>, max_round: u32, schedule: Schedule, stream: SeedStream) -> Result<Self, ProtocolError> {
        let n = states.len();
        let peers = states
            .into_iter()
            .enumerate()
            .map(|(i, s)| ProtocolState::new(i as PeerId, n, max_round, s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            peers,
            in_flight: Vec::new(),
            schedule,
            rng: stream.rng(),
            seq: 0,
            clock: 0,
            trace: Vec::new(),
            max_skew: 0,
            started: false,
        })
    }

    pub fn in_flight(&self) -> &[InFlight] {
        &self.in_flight
    }

    pub fn is_done(&self) -> bool {
        self.peers.iter().all(ProtocolState::is_done)
    }

    fn post(&mut self, msgs: Vec<PeerMessage>) {
        for msg in msgs {
            for to in 0..self.peers.len() as PeerId {
                if to == msg.sender {
                    continue;
                }
                let delay = match self.schedule {
                    Schedule::RandomDelay { max_delay } => below(&mut self.rng, max_delay as usize + 1) as u64,
                    _ => 0,
                };
                self.in_flight.push(InFlight { to, msg: msg.clone(), seq: self.seq, due: self.clock + delay });
                self.seq += 1;
            }
        }
    }

    /// Broadcasts every peer's initial state.
    pub fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        for i in 0..self.peers.len() {
            let m = self.peers[i].start();
            self.post(m);
        }
    }

    fn skew(&self) -> u32 {
        let hi = self.peers.iter().map(|p| p.round).max().unwrap_or(0);
        let lo = self.peers.iter().map(|p| p.round).min().unwrap_or(0);
        hi - lo
    }

    fn pick(&mut self) -> usize {
        match self.schedule {
            Schedule::Fifo => 0,
            Schedule::Arbitrary => below(&mut self.rng, self.in_flight.len()),
            Schedule::RandomDelay { .. } => {
                let mut best = 0;
                for (i, m) in self.in_flight.iter().enumerate() {
                    let b = &self.in_flight[best];
                    if (m.due, m.seq) < (b.due, b.seq) {
                        best = i;
                    }
                }
                best
            }
        }
    }

    /// Delivers the in-flight message at `index`.
    pub fn deliver<E, F>(&mut self, index: usize, node_update: &mut F) -> Result<(), SimError<E>>
    where
        F: FnMut(PeerId, u32, &[&StateVector]) -> Result<StateVector, E>,
    {
        self.clock += 1;
        let m = self.in_flight.remove(index);
        self.trace.push(TraceEvent {
            from: m.msg.sender,
            to: m.to,
            round: m.msg.round,
            state: m.msg.is_state(),
        });
        let to = m.to;
        let mut f = |r: u32, s: &[&StateVector]| node_update(to, r, s);
        let out = self.peers[to as usize]
            .handle(m.msg, &mut f)
            .map_err(|source| SimError::Handle { peer: to, source })?;
        self.post(out);
        let skew = self.skew();
        self.max_skew = self.max_skew.max(skew);
        if skew > 1 {
            return Err(SimError::Skew { skew, step: self.trace.len() });
        }
        Ok(())
    }

    /// Runs the scheduler until every peer finished; returns final states.
    pub fn run<E, F>(&mut self, mut node_update: F) -> Result<Vec<StateVector>, SimError<E>>
    where
        F: FnMut(PeerId, u32, &[&StateVector]) -> Result<StateVector, E>,
    {
        self.start();
        while !self.is_done() {
            if self.in_flight.is_empty() {
                return Err(SimError::Deadlock(self.peers.iter().map(ProtocolState::snapshot).collect()));
            }
            let i = self.pick();
            self.deliver(i, &mut node_update)?;
        }
        Ok(self.peers.iter().map(|p| p.own_state.clone()).collect())
    }
}
