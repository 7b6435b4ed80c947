//! The REGISTER → SETTINGS → UPLOAD → ACK exchange, on both sides.
//!
//! [`Coordinator`] owns the [`ServerState`] and is transport-agnostic.
//! Uploads that arrive ahead of their round are parked and folded in as soon
//! as every earlier round is in, so aggregation always follows registration
//! order. A client that lost its connection can reconnect, register again
//! under the same tag and re-send; it gets the same settings back and a
//! `Duplicate` acknowledgement if its upload already went through.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::client::{local_train, ClientError, FeatureBundle, LocalUpdate};
use crate::io::{channel_pair, AckStatus, Message, ProtocolError, Settings, StreamTransport, Transport};
use crate::registry::{ClassId, SplitResult};
use crate::server::{AggregationMode, GlobalModel, ServerError, ServerState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticipationError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("server answered {0:?}")]
    Refused(AckStatus),
}

impl ParticipationError {
    /// Worth reconnecting and trying again.
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Protocol(ProtocolError::Closed | ProtocolError::Io(_)))
    }
}

#[derive(Debug)]
struct Registration {
    classes: BTreeSet<ClassId>,
    split: SplitResult,
    outcome: Option<AckStatus>,
}

#[derive(Debug)]
pub struct Coordinator {
    state: ServerState,
    mode: AggregationMode,
    sessions: BTreeMap<String, Registration>,
    pending: BTreeMap<u64, LocalUpdate>,
    failure: Option<(u64, ServerError)>,
}

impl Coordinator {
    pub fn new(state: ServerState, mode: AggregationMode) -> Self {
        Self { state, mode, sessions: BTreeMap::new(), pending: BTreeMap::new(), failure: None }
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    /// Rounds folded into the state so far.
    pub fn aggregated(&self) -> u64 {
        self.state.round()
    }

    pub fn registered(&self) -> usize {
        self.sessions.len()
    }

    /// The error that stopped aggregation, with its round.
    pub fn failure(&self) -> Option<&(u64, ServerError)> {
        self.failure.as_ref()
    }

    /// `f64` values held on the server path, parked uploads included.
    /// Nothing here has a per-sample dimension.
    pub fn stored_values(&self) -> usize {
        self.state.stored_values() + self.pending.values().map(LocalUpdate::payload_len).sum::<usize>()
    }

    /// Settings for `tag`. A repeated registration with the same classes
    /// gets the original answer; with different classes it is refused.
    pub fn register(&mut self, tag: &str, classes: &BTreeSet<ClassId>) -> Result<Settings, ServerError> {
        if let Some(reg) = self.sessions.get(tag) {
            if &reg.classes != classes {
                return Err(ServerError::DimensionMismatch(format!(
                    "client {tag} registered again with a different class set"
                )));
            }
            return Ok(self.settings_for(&reg.split));
        }
        let split = self.state.register(classes)?;
        log::debug!("registered {tag} as round {} ({} new classes)", split.round, split.unknown.len());
        let settings = self.settings_for(&split);
        self.sessions.insert(tag.to_string(), Registration { classes: classes.clone(), split, outcome: None });
        Ok(settings)
    }

    fn settings_for(&self, split: &SplitResult) -> Settings {
        Settings::from_split(split, self.state.gamma(), self.state.embedding_width())
    }

    pub fn upload(&mut self, tag: Option<&str>, update: LocalUpdate) -> AckStatus {
        let Some(tag) = tag else {
            log::warn!("upload before registration");
            return AckStatus::Rejected;
        };
        let Some(reg) = self.sessions.get_mut(tag) else {
            return AckStatus::Rejected;
        };
        match reg.outcome {
            Some(AckStatus::Accepted | AckStatus::Duplicate) => return AckStatus::Duplicate,
            Some(other) => return other,
            None => {}
        }
        let round = reg.split.round;
        let l = self.state.embedding_width();
        let fits = update.round_hint == round
            && update.gram.shape() == (l, l)
            && update.w_known.shape() == (l, reg.split.known_width())
            && update.w_unknown.shape() == (l, reg.split.unknown_width());
        if !fits {
            log::warn!("upload from {tag} does not match its registration for round {round}");
            return AckStatus::Rejected;
        }
        if self.failure.is_some() {
            reg.outcome = Some(AckStatus::NumericalFailure);
            return AckStatus::NumericalFailure;
        }
        self.pending.insert(round, update);
        self.drain();
        let status = match &self.failure {
            Some((r, _)) if *r == round => AckStatus::NumericalFailure,
            _ => AckStatus::Accepted,
        };
        if let Some(reg) = self.sessions.get_mut(tag) {
            reg.outcome = Some(status);
        }
        status
    }

    fn drain(&mut self) {
        while self.failure.is_none() {
            let next = self.state.round() + 1;
            let Some(update) = self.pending.remove(&next) else { break };
            let split = self
                .sessions
                .values()
                .find(|r| r.split.round == next)
                .map(|r| r.split.clone())
                .expect("parked upload has a registration");
            if let Err(e) = self.state.aggregate_with(&update, &split, self.mode) {
                log::error!("aggregation of round {next} failed: {e}");
                self.failure = Some((next, e));
            }
        }
    }

    pub fn finalize(&self) -> Result<GlobalModel, ServerError> {
        if let Some((_, e)) = &self.failure {
            return Err(e.clone());
        }
        self.state.finalize()
    }

    pub fn into_state(self) -> ServerState {
        self.state
    }
}

fn lock(coord: &Mutex<Coordinator>) -> MutexGuard<'_, Coordinator> {
    coord.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Answers one client connection until it closes.
pub fn serve_connection<T: Transport>(coord: &Mutex<Coordinator>, transport: &mut T) -> Result<(), ProtocolError> {
    let mut tag: Option<String> = None;
    loop {
        let msg = match transport.recv() {
            Ok(m) => m,
            Err(ProtocolError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        let reply = match msg {
            Message::Register { tag: t, classes } => match lock(coord).register(&t, &classes) {
                Ok(settings) => {
                    tag = Some(t);
                    Message::Settings(settings)
                }
                Err(e) => {
                    log::warn!("refused registration of {t}: {e}");
                    Message::Ack(AckStatus::Rejected)
                }
            },
            Message::Upload(update) => Message::Ack(lock(coord).upload(tag.as_deref(), update)),
            other => {
                return Err(ProtocolError::Unexpected { expected: "REGISTER or UPLOAD", got: other.kind().name() })
            }
        };
        transport.send(&reply)?;
    }
}

/// The client half: register, train on the returned split, upload.
pub fn participate<T: Transport>(transport: &mut T, bundle: &FeatureBundle) -> Result<AckStatus, ParticipationError> {
    transport.send(&Message::Register {
        tag: bundle.client_tag.clone(),
        classes: bundle.declared_classes.clone(),
    })?;
    let settings = match transport.recv()? {
        Message::Settings(s) => s,
        Message::Ack(status) => return Err(ParticipationError::Refused(status)),
        other => {
            return Err(ProtocolError::Unexpected { expected: "SETTINGS", got: other.kind().name() }.into())
        }
    };
    if settings.embedding_width != bundle.embedding_width() as u64 {
        return Err(ClientError::SplitMismatch(format!(
            "server expects {} features, bundle has {}",
            settings.embedding_width,
            bundle.embedding_width()
        ))
        .into());
    }
    let split = settings.to_split(&bundle.declared_classes);
    let update = local_train(bundle, &split, settings.gamma)?;
    transport.send(&Message::Upload(update))?;
    match transport.recv()? {
        Message::Ack(status) if status.is_success() => Ok(status),
        Message::Ack(status) => Err(ParticipationError::Refused(status)),
        other => Err(ProtocolError::Unexpected { expected: "ACK", got: other.kind().name() }.into()),
    }
}

/// A federation whose clients talk to the coordinator over in-process
/// channels, one connection per client.
pub struct InProcess {
    coord: Mutex<Coordinator>,
}

impl InProcess {
    pub fn new(coord: Coordinator) -> Self {
        Self { coord: Mutex::new(coord) }
    }

    pub fn coordinator(&self) -> MutexGuard<'_, Coordinator> {
        lock(&self.coord)
    }

    pub fn submit(&self, bundle: &FeatureBundle) -> Result<AckStatus, ParticipationError> {
        let (mut server_end, mut client_end) = channel_pair();
        thread::scope(|s| {
            let server = s.spawn(|| serve_connection(&self.coord, &mut server_end));
            let result = participate(&mut client_end, bundle);
            drop(client_end);
            match server.join().expect("connection handler panicked") {
                Ok(()) => result,
                Err(e) => result.and(Err(e.into())),
            }
        })
    }

    pub fn into_inner(self) -> Coordinator {
        self.coord.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

/// Serves TCP clients until `expected` rounds are aggregated (or
/// aggregation fails), then hands the coordinator back.
pub fn serve(listener: TcpListener, coord: Coordinator, expected: u64) -> Result<Coordinator, ProtocolError> {
    let io = |e: std::io::Error| ProtocolError::Io(e.to_string());
    let coord = Arc::new(Mutex::new(coord));
    listener.set_nonblocking(true).map_err(io)?;
    let mut handlers = Vec::new();
    loop {
        {
            let c = lock(&coord);
            if c.aggregated() >= expected || c.failure().is_some() {
                break;
            }
        }
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("connection from {peer}");
                stream.set_nonblocking(false).map_err(io)?;
                stream.set_read_timeout(Some(Duration::from_secs(60))).map_err(io)?;
                let coord = Arc::clone(&coord);
                handlers.push(thread::spawn(move || {
                    let mut t = StreamTransport::new(stream);
                    if let Err(e) = serve_connection(&coord, &mut t) {
                        log::warn!("connection from {peer}: {e}");
                    }
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(io(e)),
        }
    }
    for h in handlers {
        let _ = h.join();
    }
    let coord = Arc::try_unwrap(coord).map_err(|_| ProtocolError::Io("connection still open".into()))?;
    Ok(coord.into_inner().unwrap_or_else(|p| p.into_inner()))
}

/// Connects, participates, and retries from scratch on connection loss.
pub fn join(addr: impl ToSocketAddrs, bundle: &FeatureBundle, attempts: usize) -> Result<AckStatus, ParticipationError> {
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| ProtocolError::Io(e.to_string()))?
        .collect();
    let mut last = ParticipationError::Protocol(ProtocolError::Closed);
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(50 << attempt.min(6)));
        }
        let outcome = TcpStream::connect(&addrs[..])
            .map_err(|e| ParticipationError::Protocol(ProtocolError::Io(e.to_string())))
            .and_then(|s| participate(&mut StreamTransport::new(s), bundle));
        match outcome {
            Err(e) if e.is_transient() => {
                log::warn!("{}: attempt {} failed: {e}", bundle.client_tag, attempt + 1);
                last = e;
            }
            other => return other,
        }
    }
    Err(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn ids(v: &[u64]) -> BTreeSet<ClassId> {
        v.iter().map(|&i| ClassId(i)).collect()
    }

    fn coordinator(l: usize, gamma: f64) -> Coordinator {
        Coordinator::new(ServerState::new(l, gamma).unwrap(), AggregationMode::Simplified)
    }

    fn bundle(tag: &str, rows: &[[f64; 2]], labels: &[u64]) -> FeatureBundle {
        FeatureBundle::from_labels(tag, Matrix::from_rows(rows), labels.iter().map(|&c| ClassId(c)).collect())
    }

    #[test]
    fn re_registration_is_idempotent() {
        let mut c = coordinator(2, 1.0);
        let a = c.register("a", &ids(&[1, 2])).unwrap();
        let b = c.register("b", &ids(&[2, 3])).unwrap();
        assert_eq!(c.register("a", &ids(&[1, 2])).unwrap(), a);
        assert_eq!(b.round, 2);
        assert!(c.register("a", &ids(&[1])).is_err());
        assert_eq!(c.registered(), 2);
    }

    #[test]
    fn out_of_order_uploads_are_parked() {
        let b1 = bundle("one", &[[1.0, 0.0], [0.0, 1.0]], &[0, 1]);
        let b2 = bundle("two", &[[1.0, 1.0], [2.0, 0.5]], &[1, 2]);
        let mut c = coordinator(2, 0.5);
        let s1 = c.register("one", &b1.declared_classes).unwrap().to_split(&b1.declared_classes);
        let s2 = c.register("two", &b2.declared_classes).unwrap().to_split(&b2.declared_classes);
        let u1 = local_train(&b1, &s1, 0.5).unwrap();
        let u2 = local_train(&b2, &s2, 0.5).unwrap();

        assert_eq!(c.upload(Some("two"), u2.clone()), AckStatus::Accepted);
        assert_eq!(c.aggregated(), 0);
        assert_eq!(c.upload(Some("one"), u1.clone()), AckStatus::Accepted);
        assert_eq!(c.aggregated(), 2);
        assert_eq!(c.upload(Some("two"), u2.clone()), AckStatus::Duplicate);

        let mut direct = ServerState::new(2, 0.5).unwrap();
        direct.register(&b1.declared_classes).unwrap();
        direct.register(&b2.declared_classes).unwrap();
        direct.aggregate(&u1, &s1).unwrap();
        direct.aggregate(&u2, &s2).unwrap();
        assert_eq!(c.finalize().unwrap(), direct.finalize().unwrap());
    }

    #[test]
    fn mismatched_uploads_are_rejected() {
        let b = bundle("x", &[[1.0, 0.0], [0.0, 1.0]], &[0, 1]);
        let mut c = coordinator(2, 1.0);
        let s = c.register("x", &b.declared_classes).unwrap().to_split(&b.declared_classes);
        let mut u = local_train(&b, &s, 1.0).unwrap();
        assert_eq!(c.upload(None, u.clone()), AckStatus::Rejected);
        assert_eq!(c.upload(Some("nobody"), u.clone()), AckStatus::Rejected);
        u.round_hint = 5;
        assert_eq!(c.upload(Some("x"), u.clone()), AckStatus::Rejected);
        u.round_hint = 1;
        u.w_unknown = Matrix::zeros(2, 3);
        assert_eq!(c.upload(Some("x"), u), AckStatus::Rejected);
    }

    #[test]
    fn numerical_failure_is_reported_and_sticky() {
        let b = bundle("x", &[[1.0, 0.0], [0.0, 1.0]], &[0, 1]);
        let mut c = coordinator(2, 1.0);
        let s = c.register("x", &b.declared_classes).unwrap().to_split(&b.declared_classes);
        let b2 = bundle("y", &[[1.0, 0.0], [0.0, 1.0]], &[0]);
        c.register("y", &b2.declared_classes).unwrap();
        c.upload(Some("x"), local_train(&b, &s, 1.0).unwrap());
        // An indefinite "Gram" matrix makes R̃_2 indefinite.
        let bad = LocalUpdate {
            w_known: Matrix::zeros(2, 2),
            w_unknown: Matrix::zeros(2, 0),
            gram: Matrix::from_rows(&[[-5.0, 0.0], [0.0, 1.0]]),
            round_hint: 2,
        };
        assert_eq!(c.upload(Some("y"), bad.clone()), AckStatus::NumericalFailure);
        assert_eq!(c.upload(Some("y"), bad), AckStatus::NumericalFailure);
        assert!(c.finalize().is_err());
    }

    #[test]
    fn in_process_matches_direct_aggregation() {
        let b1 = bundle("one", &[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], &[0, 1, 1]);
        let b2 = bundle("two", &[[3.0, 1.0]], &[2]);
        let fed = InProcess::new(coordinator(2, 0.1));
        assert_eq!(fed.submit(&b1).unwrap(), AckStatus::Accepted);
        assert_eq!(fed.submit(&b2).unwrap(), AckStatus::Accepted);
        assert_eq!(fed.submit(&b2).unwrap(), AckStatus::Duplicate);
        let model = fed.coordinator().finalize().unwrap();
        assert_eq!(model.column_classes, vec![ClassId(0), ClassId(1), ClassId(2)]);
        assert_eq!(model.round, 2);
    }

    #[test]
    fn width_mismatch_is_a_client_error() {
        let fed = InProcess::new(coordinator(3, 1.0));
        let b = bundle("w", &[[1.0, 0.0]], &[0]);
        assert!(matches!(fed.submit(&b), Err(ParticipationError::Client(ClientError::SplitMismatch(_)))));
    }
}
