//! TCP transport: one process per server, a client that queries all of them.
//!
//! Every message is framed as `"PIR1" | type: u8 | len: u32 BE | payload`.
//!
//! * QUERY (1): `N, K, M, p` as `u32` BE, then the `k x M` query entries as
//!   `u16` BE in row-major order.
//! * ANSWER (2): `u16` round count, then per round a flag byte (0 silent,
//!   1 present) followed by a `u64` BE value when present.
//! * ERROR (3): `u16` code, then a UTF-8 detail string.
//!
//! A frame with the wrong magic is dropped by closing the connection.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::rng;
use crate::scheme::{
    build_server_query, decode, gen_master_query, is_null_round, server_answer, AnswerVector,
    ParamsHeader, QueryMatrix, Retrieval, SchemeError, ServerStorage, SystemParams,
};
use crate::store::{self, StoreError};

pub const MAGIC: [u8; 4] = *b"PIR1";
pub const HEADER_LEN: usize = 9;
/// Frames above this size are refused before allocating.
pub const MAX_PAYLOAD: u32 = 1 << 24;

pub const MSG_QUERY: u8 = 1;
pub const MSG_ANSWER: u8 = 2;
pub const MSG_ERROR: u8 = 3;

pub const ERR_PARAMS: u16 = 1;
pub const ERR_MALFORMED_QUERY: u16 = 2;
pub const ERR_PROTOCOL: u16 = 3;
pub const ERR_INTERNAL: u16 = 4;

/// Deadline used by the CLI when none is given.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum NetError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("remote error {code}: {detail}")]
    Remote { code: u16, detail: String },
    #[error("server {index} ({addr}): {source}")]
    Server {
        index: usize,
        addr: String,
        source: Box<NetError>,
    },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl NetError {
    /// Index of the server that caused the failure, if any.
    pub fn server_index(&self) -> Option<usize> {
        match self {
            NetError::Server { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// A query as it travels on the wire, not yet validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireQuery {
    pub n: u32,
    pub k: u32,
    pub m: u32,
    pub p: u32,
    pub entries: Vec<u16>,
}

impl WireQuery {
    pub fn new(params: &SystemParams, query: &QueryMatrix) -> Self {
        let h = params.header();
        Self {
            n: h.n as u32,
            k: h.k as u32,
            m: h.m as u32,
            p: h.p as u32,
            entries: query.entries().iter().map(|&e| e as u16).collect(),
        }
    }

    pub fn header(&self) -> ParamsHeader {
        ParamsHeader {
            n: self.n as usize,
            k: self.k as usize,
            m: self.m as usize,
            p: self.p as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Query(WireQuery),
    Answer(Vec<Option<u64>>),
    Error { code: u16, detail: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Query(_) => MSG_QUERY,
            Message::Answer(_) => MSG_ANSWER,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Query(q) => {
                for v in [q.n, q.k, q.m, q.p] {
                    out.extend_from_slice(&v.to_be_bytes());
                }
                for e in &q.entries {
                    out.extend_from_slice(&e.to_be_bytes());
                }
            }
            Message::Answer(rounds) => {
                out.extend_from_slice(&(rounds.len() as u16).to_be_bytes());
                for r in rounds {
                    match r {
                        None => out.push(0),
                        Some(v) => {
                            out.push(1);
                            out.extend_from_slice(&v.to_be_bytes());
                        }
                    }
                }
            }
            Message::Error { code, detail } => {
                out.extend_from_slice(&code.to_be_bytes());
                out.extend_from_slice(detail.as_bytes());
            }
        }
        out
    }

    /// The complete frame.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(self.msg_type());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Self, NetError> {
        let short = || NetError::Protocol(format!("truncated payload for message type {msg_type}"));
        match msg_type {
            MSG_QUERY => {
                if payload.len() < 16 || !(payload.len() - 16).is_multiple_of(2) {
                    return Err(NetError::Protocol(format!("query payload of {} bytes", payload.len())));
                }
                let word = |i: usize| u32::from_be_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
                let entries = payload[16..]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect();
                Ok(Message::Query(WireQuery {
                    n: word(0),
                    k: word(1),
                    m: word(2),
                    p: word(3),
                    entries,
                }))
            }
            MSG_ANSWER => {
                let count = u16::from_be_bytes(payload.get(..2).ok_or_else(short)?.try_into().unwrap());
                let mut rest = &payload[2..];
                let mut rounds = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let (&flag, tail) = rest.split_first().ok_or_else(short)?;
                    rest = tail;
                    match flag {
                        0 => rounds.push(None),
                        1 => {
                            let bytes = rest.get(..8).ok_or_else(short)?;
                            rounds.push(Some(u64::from_be_bytes(bytes.try_into().unwrap())));
                            rest = &rest[8..];
                        }
                        f => return Err(NetError::Protocol(format!("round flag {f}"))),
                    }
                }
                if !rest.is_empty() {
                    return Err(NetError::Protocol(format!("{} trailing bytes in answer", rest.len())));
                }
                Ok(Message::Answer(rounds))
            }
            MSG_ERROR => {
                let code = u16::from_be_bytes(payload.get(..2).ok_or_else(short)?.try_into().unwrap());
                let detail = String::from_utf8(payload[2..].to_vec())
                    .map_err(|_| NetError::Protocol("error detail is not UTF-8".into()))?;
                Ok(Message::Error { code, detail })
            }
            t => Err(NetError::UnknownType(t)),
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, NetError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(NetError::BadMagic(magic));
    }
    let len = u32::from_be_bytes(header[5..9].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(NetError::TooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Message::decode_payload(header[4], &payload).map(Some)
}

/// Computes the reply to one decoded message.
pub fn handle_message(msg: Message, params: &SystemParams, storage: &ServerStorage) -> Message {
    let query = match msg {
        Message::Query(q) => q,
        other => {
            return Message::Error {
                code: ERR_PROTOCOL,
                detail: format!("expected a query, got message type {}", other.msg_type()),
            }
        }
    };
    if query.header() != params.header() {
        return Message::Error {
            code: ERR_PARAMS,
            detail: format!("query is for {:?}, this server holds {params}", query.header()),
        };
    }
    let entries = query.entries.iter().map(|&e| e as usize).collect();
    let parsed = QueryMatrix::new(params.k_reduced(), params.m_files(), params.n_reduced(), entries);
    match parsed.and_then(|q| server_answer(storage, &q, params)) {
        Ok(answer) => Message::Answer(answer.rounds().iter().map(|r| r.map(|v| v.value())).collect()),
        Err(e @ (SchemeError::MalformedQuery(_) | SchemeError::Dimension(_))) => Message::Error {
            code: ERR_MALFORMED_QUERY,
            detail: e.to_string(),
        },
        Err(e) => Message::Error {
            code: ERR_INTERNAL,
            detail: e.to_string(),
        },
    }
}

fn handle_connection(mut stream: TcpStream, params: &SystemParams, storage: &ServerStorage) -> Result<(), NetError> {
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    loop {
        let reply = match read_message(&mut stream) {
            Ok(None) => return Ok(()),
            Ok(Some(msg)) => handle_message(msg, params, storage),
            Err(e @ (NetError::BadMagic(_) | NetError::TooLarge(_) | NetError::Io(_))) => {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
            Err(e) => {
                let reply = Message::Error {
                    code: ERR_PROTOCOL,
                    detail: e.to_string(),
                };
                write_message(&mut stream, &reply)?;
                return Err(e);
            }
        };
        write_message(&mut stream, &reply)?;
    }
}

/// A bound server holding one storage vector.
pub struct Server {
    listener: TcpListener,
    params: SystemParams,
    storage: Arc<ServerStorage>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, params: SystemParams, storage: ServerStorage) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            params,
            storage: Arc::new(storage),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    fn accept_loop(&self, stop: Option<&AtomicBool>) {
        for conn in self.listener.incoming() {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let peer = stream.peer_addr().map_or_else(|_| "?".into(), |a| a.to_string());
            let (params, storage) = (self.params, Arc::clone(&self.storage));
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &params, &storage) {
                    log::warn!("connection from {peer}: {e}");
                }
            });
        }
    }

    /// Serves until the process exits.
    pub fn run(self) {
        self.accept_loop(None);
    }

    /// Serves on a background thread until the handle is shut down.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::spawn(move || self.accept_loop(Some(&flag)));
        Ok(ServerHandle { addr, stop, thread })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = self.thread.join();
    }
}

/// Loads a storage file and serves it on `addr` forever.
pub fn serve<A: ToSocketAddrs>(storage_path: &Path, addr: A) -> Result<(), NetError> {
    let (params, storage) = store::read_storage(storage_path)?;
    let index = storage.server_index();
    let server = Server::bind(addr, params, storage)?;
    log::info!("server {index} for {params} listening on {}", server.local_addr()?);
    server.run();
    Ok(())
}

/// Starts one loopback server per storage vector on ephemeral ports.
pub fn spawn_local(params: &SystemParams, storages: &[ServerStorage]) -> io::Result<Vec<ServerHandle>> {
    storages
        .iter()
        .map(|s| Server::bind("127.0.0.1:0", *params, s.clone())?.spawn())
        .collect()
}

/// A networked retrieval with its wire accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetRetrieval {
    pub retrieval: Retrieval,
    /// ANSWER payload bytes from each server: 2 + 9 per value + 1 per silent round.
    pub answer_payload_bytes: Vec<usize>,
    /// All bytes received, frame headers included.
    pub bytes_received: usize,
    pub bytes_sent: usize,
}

fn exchange(addr: &str, msg: &Message, timeout: Duration) -> Result<(Message, usize), NetError> {
    let mut last = None;
    let mut stream = None;
    for sa in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = Some(e),
        }
    }
    let mut stream = stream.ok_or_else(|| {
        last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing"))
    })?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    write_message(&mut stream, msg)?;
    let reply = read_message(&mut stream)?
        .ok_or_else(|| NetError::Protocol("connection closed without a reply".into()))?;
    let received = HEADER_LEN + reply.payload().len();
    Ok((reply, received))
}

fn check_answer(rounds: Vec<Option<u64>>, query: &QueryMatrix, params: &SystemParams) -> Result<AnswerVector, NetError> {
    if rounds.len() != query.rows() {
        return Err(NetError::Protocol(format!("{} rounds, expected {}", rounds.len(), query.rows())));
    }
    let field = params.field();
    rounds
        .into_iter()
        .enumerate()
        .map(|(s, r)| match (r, is_null_round(query.row(s), params)) {
            (None, true) => Ok(None),
            (Some(v), false) => field
                .try_elem(v)
                .map(Some)
                .map_err(|e| NetError::Protocol(format!("round {s}: {e}"))),
            (_, null) => Err(NetError::Protocol(format!(
                "round {s} should be {}",
                if null { "silent" } else { "present" }
            ))),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(AnswerVector::new)
}

/// Retrieves file `theta` with a given master query from servers listed in
/// server-index order.
pub fn client_retrieve_with_query(
    addrs: &[String],
    master: &QueryMatrix,
    theta: usize,
    params: &SystemParams,
    timeout: Duration,
) -> Result<NetRetrieval, NetError> {
    if addrs.len() != params.n_servers() {
        return Err(SchemeError::Dimension(format!(
            "expected {} server addresses, got {}",
            params.n_servers(),
            addrs.len()
        ))
        .into());
    }
    if params.n_reduced() > u16::MAX as usize + 1 {
        return Err(SchemeError::Params(format!("n = {} does not fit u16 query entries", params.n_reduced())).into());
    }
    let queries = (0..params.n_servers())
        .map(|t| build_server_query(master, theta, t, params))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<(AnswerVector, usize, usize), NetError>> = thread::scope(|scope| {
        let handles: Vec<_> = addrs
            .iter()
            .zip(&queries)
            .map(|(addr, q)| {
                scope.spawn(move || {
                    let msg = Message::Query(WireQuery::new(params, q));
                    let sent = HEADER_LEN + msg.payload().len();
                    match exchange(addr, &msg, timeout)? {
                        (Message::Answer(rounds), received) => {
                            Ok((check_answer(rounds, q, params)?, sent, received))
                        }
                        (Message::Error { code, detail }, _) => Err(NetError::Remote { code, detail }),
                        (other, _) => Err(NetError::Protocol(format!("unexpected message type {}", other.msg_type()))),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(NetError::Protocol("client thread panicked".into()))))
            .collect()
    });

    let mut answers = Vec::with_capacity(results.len());
    let (mut sent, mut received) = (0, 0);
    for (index, res) in results.into_iter().enumerate() {
        let (answer, s, r) = res.map_err(|source| NetError::Server {
            index,
            addr: addrs[index].clone(),
            source: Box::new(source),
        })?;
        sent += s;
        received += r;
        answers.push(answer);
    }
    let file = decode(&answers, master, theta, params, &params.code())?;
    Ok(NetRetrieval {
        retrieval: Retrieval {
            file,
            query: master.clone(),
            per_server: answers.iter().map(AnswerVector::download_len).collect(),
        },
        answer_payload_bytes: answers.iter().map(|a| 2 + a.rounds().iter().map(|r| if r.is_some() { 9 } else { 1 }).sum::<usize>()).collect(),
        bytes_received: received,
        bytes_sent: sent,
    })
}

/// Retrieves file `theta` with the master query drawn from stream 0 of
/// `seed`, exactly as `scheme::retrieve` does with `rng::stream(seed, 0)`.
pub fn client_retrieve(
    addrs: &[String],
    theta: usize,
    params: &SystemParams,
    seed: u64,
    timeout: Duration,
) -> Result<NetRetrieval, NetError> {
    if theta >= params.m_files() {
        return Err(SchemeError::Index {
            what: "file",
            index: theta,
            bound: params.m_files(),
        }
        .into());
    }
    let master = gen_master_query(params, &mut rng::stream(seed, 0));
    client_retrieve_with_query(addrs, &master, theta, params, timeout)
}
