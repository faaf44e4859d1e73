//! Gossip rounds between clients, the server-coordinated baseline, and the
//! bookkeeping around them.
//!
//! A decentralized round is synchronous: every client sends its atoms to one
//! uniformly chosen peer, the transport acts as a barrier, then each client
//! averages its atoms with everything it received and runs a local update.
//! Barycentric coordinates never leave a client; [`RoundMessage`] has no field
//! that could carry them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{client_update, Dictionary, OptimizerConfig};
use crate::simplex::project_in_place;
use crate::{Error, LabeledDistribution, Result};

/// A participant in the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NodeId {
    Client(usize),
    Server,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Client(id) => write!(f, "client-{id}"),
            NodeId::Server => write!(f, "server"),
        }
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.to_string()
    }
}

impl TryFrom<String> for NodeId {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "server" {
            return Ok(NodeId::Server);
        }
        s.strip_prefix("client-")
            .and_then(|id| id.parse().ok())
            .map(NodeId::Client)
            .ok_or_else(|| format!("bad node id {s:?}"))
    }
}

/// Atoms in flight. Built only from atoms, so `α` has nowhere to go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundMessage {
    pub sender: NodeId,
    pub round: usize,
    pub atoms: Vec<LabeledDistribution>,
}

impl RoundMessage {
    pub fn new(sender: NodeId, round: usize, atoms: &[LabeledDistribution]) -> Self {
        Self {
            sender,
            round,
            atoms: atoms.to_vec(),
        }
    }

    /// Numbers carried: `Σ_k n_k (d + C)`.
    pub fn payload_size(&self) -> usize {
        self.atoms
            .iter()
            .map(|a| a.n() * (a.dim() + a.n_classes().unwrap_or(0)))
            .sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("round messages always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Send/deliver record for the optional JSON-lines trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportEvent {
    pub event: EventKind,
    pub round: usize,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
}

/// Message delivery between protocol participants.
///
/// `drain` is the round barrier: it hands a receiver every message addressed
/// to it and must reject messages stamped with another round.
pub trait Transport {
    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()>;
    fn drain(&mut self, round: usize, receiver: NodeId) -> Result<Vec<RoundMessage>>;
}

/// In-process mailboxes. Messages cross an encode/decode boundary so the
/// receiver only ever sees what the wire format carries.
#[derive(Debug, Default)]
pub struct InMemoryTransport {
    mailboxes: BTreeMap<NodeId, Vec<(NodeId, Vec<u8>)>>,
    events: Vec<TransportEvent>,
}

impl InMemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TransportEvent] {
        &self.events
    }

    pub fn write_event_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl Transport for InMemoryTransport {
    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()> {
        if to == msg.sender {
            return Err(Error::Transport {
                round: msg.round,
                sender: msg.sender.to_string(),
                reason: "node addressed a message to itself".into(),
            });
        }
        self.events.push(TransportEvent {
            event: EventKind::Send,
            round: msg.round,
            sender: msg.sender,
            receiver: to,
            payload_size: msg.payload_size(),
        });
        self.mailboxes.entry(to).or_default().push((msg.sender, msg.encode()));
        Ok(())
    }

    fn drain(&mut self, round: usize, receiver: NodeId) -> Result<Vec<RoundMessage>> {
        let pending = self.mailboxes.remove(&receiver).unwrap_or_default();
        let mut out = Vec::with_capacity(pending.len());
        for (sender, bytes) in pending {
            let msg = RoundMessage::decode(&bytes).map_err(|e| Error::Transport {
                round,
                sender: sender.to_string(),
                reason: format!("undecodable message: {e}"),
            })?;
            if msg.round != round {
                return Err(Error::Transport {
                    round,
                    sender: sender.to_string(),
                    reason: format!("message stamped with round {}", msg.round),
                });
            }
            self.events.push(TransportEvent {
                event: EventKind::Deliver,
                round,
                sender,
                receiver,
                payload_size: msg.payload_size(),
            });
            out.push(msg);
        }
        Ok(out)
    }
}

/// Message and payload counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    /// Messages sent in each round, indexed by `round - 1`.
    pub messages_per_round: Vec<usize>,
    /// Payload size of every message, in send order.
    pub payload_sizes: Vec<usize>,
    pub total_messages: usize,
    pub total_payload: usize,
    pub sent: BTreeMap<NodeId, usize>,
    pub received: BTreeMap<NodeId, usize>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, from: NodeId, to: NodeId, payload: usize) {
        assert!(round >= 1, "rounds are numbered from 1");
        if self.messages_per_round.len() < round {
            self.messages_per_round.resize(round, 0);
        }
        self.messages_per_round[round - 1] += 1;
        self.payload_sizes.push(payload);
        self.total_messages += 1;
        self.total_payload += payload;
        *self.sent.entry(from).or_default() += 1;
        *self.received.entry(to).or_default() += 1;
    }
}

/// Everything one client owns.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: LabeledDistribution,
    pub labeled: bool,
    pub dict: Dictionary,
    pub cfg: OptimizerConfig,
    pub rng: ChaCha8Rng,
    pub round: usize,
}

impl ClientState {
    /// The client's random stream is keyed by its id, so clients never share
    /// draws and scheduling order cannot matter.
    pub fn new(
        id: usize,
        data: LabeledDistribution,
        labeled: bool,
        dict: Dictionary,
        cfg: OptimizerConfig,
        master_seed: u64,
    ) -> Self {
        Self {
            id,
            data,
            labeled,
            dict,
            cfg,
            rng: client_rng(master_seed, id),
            round: 0,
        }
    }
}

/// Independent stream `id` of the master seed.
pub fn client_rng(master_seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(id as u64 + 1);
    rng
}

/// A seed for `(purpose, index)` that cannot collide with a client stream.
pub fn derive_seed(master_seed: u64, purpose: u32, index: u32) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((purpose as u64 + 1) << 32) | index as u64);
    rng.next_u64()
}

/// Uniform over `{0, …, L-1} \ {self_id}`.
pub fn select_peer(self_id: usize, n_clients: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_clients < 2 {
        return Err(Error::InvalidArgument(format!("peer selection needs at least 2 clients, got {n_clients}")));
    }
    if self_id >= n_clients {
        return Err(Error::InvalidArgument(format!("client {self_id} outside 0..{n_clients}")));
    }
    let r = rng.random_range(0..n_clients - 1);
    Ok(if r >= self_id { r + 1 } else { r })
}

fn same_shape(a: &LabeledDistribution, b: &LabeledDistribution) -> bool {
    a.n() == b.n() && a.dim() == b.dim() && a.n_classes() == b.n_classes()
}

/// Index-wise mean of supports and labels over atom sets, label rows pushed
/// back onto the simplex. The running mean keeps identical inputs bitwise
/// identical.
pub fn average_atoms(sets: &[&[LabeledDistribution]]) -> Vec<LabeledDistribution> {
    let first = sets[0];
    first
        .iter()
        .enumerate()
        .map(|(k, atom)| {
            let (mut x, mut y) = atom.clone().into_parts();
            for (count, set) in sets.iter().enumerate().skip(1) {
                let w = 1.0 / (count + 1) as f64;
                let other = &set[k];
                x.zip_mut_with(&other.features(), |m, &v| *m += (v - *m) * w);
                if let (Some(y), Some(oy)) = (y.as_mut(), other.labels()) {
                    y.zip_mut_with(&oy, |m, &v| *m += (v - *m) * w);
                }
            }
            if let Some(y) = y.as_mut() {
                y.outer_iter_mut().for_each(project_in_place);
            }
            LabeledDistribution::from_parts(x, y)
        })
        .collect()
}

/// Mean of `own` and every received atom set; `own` unchanged when nothing
/// arrived.
pub fn client_aggregate(own: &[LabeledDistribution], received: &[RoundMessage]) -> Result<Vec<LabeledDistribution>> {
    for msg in received {
        let ok = msg.atoms.len() == own.len() && msg.atoms.iter().zip(own).all(|(a, b)| same_shape(a, b));
        if !ok {
            return Err(Error::Transport {
                round: msg.round,
                sender: msg.sender.to_string(),
                reason: format!(
                    "atom shapes {:?} do not match local {:?}",
                    shapes(&msg.atoms),
                    shapes(own)
                ),
            });
        }
    }
    if received.is_empty() {
        return Ok(own.to_vec());
    }
    let mut sets: Vec<&[LabeledDistribution]> = vec![own];
    sets.extend(received.iter().map(|m| m.atoms.as_slice()));
    Ok(average_atoms(&sets))
}

fn shapes(atoms: &[LabeledDistribution]) -> Vec<(usize, usize, Option<usize>)> {
    atoms.iter().map(|a| (a.n(), a.dim(), a.n_classes())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub rounds: usize,
    /// Snapshot all clients' atoms every this many rounds (0 disables).
    pub snapshot_interval: usize,
}

/// Every client's atoms at the end of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: usize,
    pub atoms: Vec<Vec<LabeledDistribution>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// `losses[r][l]`: mean batch loss of client `l` during round `r + 1`.
    pub losses: Vec<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
}

impl RunHistory {
    fn finish_round(&mut self, round: usize, losses: Vec<f64>, clients: &[ClientState], opts: &RunOptions) {
        self.losses.push(losses);
        if opts.snapshot_interval > 0 && round.is_multiple_of(opts.snapshot_interval) {
            self.snapshots.push(Snapshot {
                round,
                atoms: clients.iter().map(|c| c.dict.atoms().to_vec()).collect(),
            });
        }
    }
}

fn check_clients(clients: &[ClientState]) -> Result<()> {
    if let Some((pos, c)) = clients.iter().enumerate().find(|(pos, c)| c.id != *pos) {
        return Err(Error::InvalidArgument(format!("client at position {pos} has id {}", c.id)));
    }
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    for c in clients {
        let ok = c.dict.k() == first.dict.k()
            && c.dict.atoms().iter().zip(first.dict.atoms()).all(|(a, b)| same_shape(a, b));
        if !ok {
            return Err(Error::InvalidArgument(format!("client {} dictionary shape differs from client 0", c.id)));
        }
    }
    Ok(())
}

/// Aggregated atoms go in, local update runs; returns the round's mean loss.
fn local_step(client: &mut ClientState, atoms: Vec<LabeledDistribution>, round: usize) -> Result<f64> {
    client.dict.set_atoms(atoms)?;
    let seed = client.rng.next_u64();
    let (dict, report) = client_update(&client.dict, &client.data, client.labeled, &client.cfg, seed)?;
    client.dict = dict;
    client.round = round;
    Ok(report.mean_loss())
}

/// Serverless gossip training for `opts.rounds` synchronous rounds.
pub fn run_decentralized(
    clients: &mut [ClientState],
    opts: &RunOptions,
    transport: &mut dyn Transport,
    ledger: &mut CommLedger,
) -> Result<RunHistory> {
    check_clients(clients)?;
    if clients.len() < 2 {
        return Err(Error::InvalidArgument("decentralized training needs at least 2 clients".into()));
    }
    if opts.rounds == 0 {
        return Err(Error::InvalidArgument("decentralized training needs at least one round".into()));
    }
    let n_clients = clients.len();
    let mut history = RunHistory::default();

    for round in 1..=opts.rounds {
        for client in clients.iter_mut() {
            let peer = select_peer(client.id, n_clients, &mut client.rng)?;
            let msg = RoundMessage::new(NodeId::Client(client.id), round, client.dict.atoms());
            transport.send(NodeId::Client(peer), &msg)?;
            ledger.record(round, msg.sender, NodeId::Client(peer), msg.payload_size());
        }
        let inboxes = (0..n_clients)
            .map(|id| transport.drain(round, NodeId::Client(id)))
            .collect::<Result<Vec<_>>>()?;

        let losses = clients
            .par_iter_mut()
            .zip(inboxes)
            .map(|(client, inbox)| {
                let merged = client_aggregate(client.dict.atoms(), &inbox)?;
                local_step(client, merged, round)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
        history.finish_round(round, losses, clients, opts);
    }
    Ok(history)
}

/// The server's public atoms `P_g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub atoms: Vec<LabeledDistribution>,
}

/// Server-coordinated baseline: broadcast `P_g`, update locally, send back,
/// average. The initial `P_g` is installed on every client before round 1
/// without going through the ledger.
pub fn run_federated(
    clients: &mut [ClientState],
    server: &mut ServerState,
    opts: &RunOptions,
    transport: &mut dyn Transport,
    ledger: &mut CommLedger,
) -> Result<RunHistory> {
    check_clients(clients)?;
    for client in clients.iter_mut() {
        client.dict.set_atoms(server.atoms.clone())?;
    }
    let mut history = RunHistory::default();

    for round in 1..=opts.rounds {
        for client in clients.iter() {
            let msg = RoundMessage::new(NodeId::Server, round, &server.atoms);
            transport.send(NodeId::Client(client.id), &msg)?;
            ledger.record(round, NodeId::Server, NodeId::Client(client.id), msg.payload_size());
        }
        let inboxes = clients
            .iter()
            .map(|c| transport.drain(round, NodeId::Client(c.id)))
            .collect::<Result<Vec<_>>>()?;

        let losses = clients
            .par_iter_mut()
            .zip(inboxes)
            .map(|(client, mut inbox)| {
                if inbox.len() != 1 {
                    return Err(Error::Transport {
                        round,
                        sender: NodeId::Server.to_string(),
                        reason: format!("client {} got {} broadcasts", client.id, inbox.len()),
                    });
                }
                let msg = inbox.pop().expect("one message");
                local_step(client, msg.atoms, round)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;

        for client in clients.iter() {
            let msg = RoundMessage::new(NodeId::Client(client.id), round, client.dict.atoms());
            transport.send(NodeId::Server, &msg)?;
            ledger.record(round, msg.sender, NodeId::Server, msg.payload_size());
        }
        let uploads = transport.drain(round, NodeId::Server)?;
        let sets: Vec<&[LabeledDistribution]> = uploads.iter().map(|m| m.atoms.as_slice()).collect();
        server.atoms = average_atoms(&sets);
        history.finish_round(round, losses, clients, opts);
    }
    Ok(history)
}
