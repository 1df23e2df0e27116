use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::backend::{BackendError, Capabilities};
use crate::client::{Engine, EngineError};
use crate::query::{Query, Response};

use super::frame::{codes, FrameError, Hello, HelloAck, Message, RunChunk, Status, PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Server { code: u32, message: String },
    #[error("chunk covering queries {indices:?} failed on the server: {message}")]
    ChunkFailed { indices: Vec<usize>, message: String },
    #[error("connection lost; no responses for queries {missing:?}")]
    Incomplete { missing: Vec<usize> },
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
}

impl From<FrameError> for RemoteError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io(e) => RemoteError::Io(e),
            FrameError::Truncated => RemoteError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated frame")),
            other => RemoteError::Protocol(other.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub addr: String,
    pub chunk_size: usize,
    /// Chunks in flight before waiting for a result.
    pub window: usize,
    pub client_name: String,
    pub io_timeout: Option<Duration>,
}

impl RemoteConfig {
    pub fn new(addr: impl Into<String>) -> Self {
        RemoteConfig {
            addr: addr.into(),
            chunk_size: 1024,
            window: 2,
            client_name: "promptws".into(),
            io_timeout: Some(Duration::from_secs(600)),
        }
    }
}

struct Session {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_chunk_id: u64,
}

impl Session {
    fn open(config: &RemoteConfig) -> Result<(Session, HelloAck), RemoteError> {
        let stream = connect(&config.addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(config.io_timeout)?;
        stream.set_write_timeout(config.io_timeout)?;
        let mut session =
            Session { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream), next_chunk_id: 0 };
        Message::Hello(Hello { protocol_version: PROTOCOL_VERSION, client_name: config.client_name.clone() })
            .write_to(&mut session.writer)?;
        match Message::read_from(&mut session.reader)? {
            Some(Message::HelloAck(ack)) => Ok((session, ack)),
            Some(Message::Error(e)) => Err(RemoteError::Server { code: e.code, message: e.message }),
            Some(other) => Err(RemoteError::Protocol(format!("expected HELLO_ACK, got {:?}", other.kind()))),
            None => Err(RemoteError::Protocol("server closed during handshake".into())),
        }
    }
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::InvalidInput, format!("{addr} resolves to no address"));
    for a in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&a, Duration::from_secs(10)) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Asks a server for its counters over a fresh connection.
pub fn probe(addr: &str) -> Result<Status, RemoteError> {
    let stream = connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    Message::Status(Status::default()).write_to(&mut writer)?;
    match Message::read_from(&mut reader)? {
        Some(Message::Status(s)) => Ok(s),
        Some(Message::Error(e)) => Err(RemoteError::Server { code: e.code, message: e.message }),
        other => Err(RemoteError::Protocol(format!("unexpected reply {other:?}"))),
    }
}

/// Engine backed by a remote server. Queries are sent in chunks over one
/// session; a dropped connection is reopened and the unacknowledged chunks
/// are resubmitted once.
pub struct RemoteEngine {
    config: RemoteConfig,
    info: HelloAck,
    capabilities: Capabilities,
    session: Mutex<Option<Session>>,
}

impl RemoteEngine {
    pub fn connect(config: RemoteConfig) -> Result<Self, RemoteError> {
        if config.chunk_size == 0 {
            return Err(RemoteError::ZeroChunkSize);
        }
        let (session, info) = Session::open(&config)?;
        let capabilities = Capabilities::of(&info.capabilities);
        Ok(RemoteEngine { config, info, capabilities, session: Mutex::new(Some(session)) })
    }

    pub fn server_info(&self) -> &HelloAck {
        &self.info
    }

    pub fn remote_run(&self, queries: &[Query]) -> Result<Vec<Response>, RemoteError> {
        let chunks: Vec<(usize, &[Query])> =
            queries.chunks(self.config.chunk_size).enumerate().map(|(n, c)| (n * self.config.chunk_size, c)).collect();
        let mut results: Vec<Option<Vec<Response>>> = vec![None; chunks.len()];
        let mut guard = self.session.lock().expect("session lock");

        let mut resubmitted = false;
        loop {
            if guard.is_none() {
                *guard = Some(Session::open(&self.config)?.0);
            }
            let session = guard.as_mut().expect("session present");
            match self.pump(session, &chunks, &mut results) {
                Ok(()) => break,
                Err(RemoteError::Io(e)) => {
                    *guard = None;
                    if resubmitted {
                        log::warn!("connection lost again: {e}");
                        let missing = results
                            .iter()
                            .zip(&chunks)
                            .filter(|(r, _)| r.is_none())
                            .flat_map(|(_, (start, c))| *start..*start + c.len())
                            .collect();
                        return Err(RemoteError::Incomplete { missing });
                    }
                    log::warn!("connection lost ({e}); resubmitting unacknowledged chunks");
                    resubmitted = true;
                }
                Err(other) => return Err(other),
            }
        }
        Ok(results.into_iter().flat_map(|r| r.expect("all chunks acknowledged")).collect())
    }

    /// Sends every chunk without a result, keeping up to `window` in
    /// flight, and collects results in order.
    fn pump(
        &self,
        session: &mut Session,
        chunks: &[(usize, &[Query])],
        results: &mut [Option<Vec<Response>>],
    ) -> Result<(), RemoteError> {
        let todo: Vec<usize> = (0..chunks.len()).filter(|&n| results[n].is_none()).collect();
        let mut in_flight: VecDeque<(u64, usize)> = VecDeque::new();
        let mut ids: BTreeMap<u64, usize> = BTreeMap::new();
        let mut pending = todo.into_iter();
        loop {
            while in_flight.len() < self.config.window.max(1) {
                let Some(n) = pending.next() else { break };
                let chunk_id = session.next_chunk_id;
                session.next_chunk_id += 1;
                Message::RunChunk(RunChunk { chunk_id, queries: chunks[n].1.to_vec() })
                    .write_to(&mut session.writer)?;
                in_flight.push_back((chunk_id, n));
                ids.insert(chunk_id, n);
            }
            let Some(&(expected, n)) = in_flight.front() else { return Ok(()) };
            let indices = || (chunks[n].0..chunks[n].0 + chunks[n].1.len()).collect::<Vec<_>>();
            match Message::read_from(&mut session.reader)? {
                Some(Message::ChunkResult(r)) if r.chunk_id == expected => {
                    if r.responses.len() != chunks[n].1.len() {
                        return Err(RemoteError::Protocol(format!(
                            "chunk {expected}: {} responses for {} queries",
                            r.responses.len(),
                            chunks[n].1.len()
                        )));
                    }
                    results[n] = Some(r.responses);
                    in_flight.pop_front();
                }
                Some(Message::ChunkResult(r)) => {
                    return Err(RemoteError::Protocol(format!(
                        "expected result for chunk {expected}, got chunk {}",
                        r.chunk_id
                    )))
                }
                Some(Message::Error(e)) if e.code == codes::BACKEND_FAILURE && e.chunk_id == Some(expected) => {
                    return Err(RemoteError::ChunkFailed { indices: indices(), message: e.message });
                }
                Some(Message::Error(e)) => return Err(RemoteError::Server { code: e.code, message: e.message }),
                Some(other) => return Err(RemoteError::Protocol(format!("unexpected {:?} frame", other.kind()))),
                None => return Err(RemoteError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed"))),
            }
        }
    }
}

impl Engine for RemoteEngine {
    fn model_id(&self) -> &str {
        &self.info.model_id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn execute(&self, queries: &[Query]) -> Result<Vec<Response>, EngineError> {
        self.remote_run(queries).map_err(|e| match e {
            RemoteError::ChunkFailed { indices, message } => {
                EngineError::new(indices, BackendError::Other(format!("remote backend: {message}")))
            }
            RemoteError::Incomplete { missing } => EngineError::new(
                missing,
                BackendError::Transport { message: "connection lost".into(), retryable: true },
            ),
            other => EngineError::new(
                (0..queries.len()).collect(),
                BackendError::Transport { retryable: matches!(other, RemoteError::Io(_)), message: other.to_string() },
            ),
        })
    }
}
