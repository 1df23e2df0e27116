use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crate::backend::Backend;
use crate::batching::{BatchConfig, BatchError, LocalEngine};
use crate::client::{Engine, EngineError};
use crate::query::{Query, Response};

use super::frame::{codes, ChunkResult, ErrorMessage, Frame, FrameError, HelloAck, Message, Status, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServerConfig {
    pub batch: BatchConfig,
}

type JobResult = Result<Vec<Response>, EngineError>;

struct Job {
    queries: Vec<Query>,
    reply: Sender<JobResult>,
}

#[derive(Default)]
struct Counters {
    chunks: AtomicU64,
    sessions: AtomicU64,
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    counters: Arc<Counters>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn chunks_executed(&self) -> u64 {
        self.counters.chunks.load(Ordering::SeqCst)
    }

    /// Stops accepting new sessions and waits for the accept loop to end.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind: {0}")]
    Bind(io::Error),
    #[error(transparent)]
    Config(#[from] BatchError),
}

/// Binds `addr` and serves `backend`. All sessions share one execution
/// queue, so chunks run first-come first-served through the batch planner.
pub fn serve(
    backend: Arc<dyn Backend>,
    addr: impl ToSocketAddrs,
    config: ServerConfig,
) -> Result<ServerHandle, ServeError> {
    let engine = Arc::new(LocalEngine::try_new(backend, config.batch)?);
    let listener = TcpListener::bind(addr).map_err(ServeError::Bind)?;
    let local = listener.local_addr().map_err(ServeError::Bind)?;
    let stop = Arc::new(AtomicBool::new(false));
    let counters = Arc::new(Counters::default());

    let (jobs_tx, jobs_rx) = mpsc::channel::<Job>();
    {
        let engine = engine.clone();
        let counters = counters.clone();
        thread::spawn(move || execution_loop(engine, jobs_rx, counters));
    }

    let acceptor = {
        let stop = stop.clone();
        let counters = counters.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let jobs = jobs_tx.clone();
                let engine = engine.clone();
                let counters = counters.clone();
                thread::spawn(move || {
                    counters.sessions.fetch_add(1, Ordering::SeqCst);
                    if let Err(e) = run_session(stream, engine.as_ref(), jobs, &counters) {
                        log::debug!("session ended: {e}");
                    }
                    counters.sessions.fetch_sub(1, Ordering::SeqCst);
                });
            }
        })
    };

    Ok(ServerHandle { addr: local, stop, acceptor: Some(acceptor), counters })
}

fn execution_loop(engine: Arc<LocalEngine>, jobs: Receiver<Job>, counters: Arc<Counters>) {
    for job in jobs {
        let result = engine.execute(&job.queries);
        counters.chunks.fetch_add(1, Ordering::SeqCst);
        let _ = job.reply.send(result);
    }
}

enum Outgoing {
    Now(Message),
    Chunk { chunk_id: u64, result: Receiver<JobResult> },
    Close,
}

fn error(code: u32, message: impl Into<String>, chunk_id: Option<u64>) -> Message {
    Message::Error(ErrorMessage { code, message: message.into(), chunk_id })
}

fn run_session(stream: TcpStream, engine: &LocalEngine, jobs: Sender<Job>, counters: &Counters) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let (out_tx, out_rx) = mpsc::channel::<Outgoing>();
    let writer = {
        let stream = stream.try_clone()?;
        thread::spawn(move || write_loop(stream, out_rx))
    };
    let send = |m: Outgoing| out_tx.send(m).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "writer gone"));

    let result = (|| -> io::Result<()> {
        // Handshake.
        match Message::read_from(&mut reader) {
            Ok(Some(Message::Hello(h))) if h.protocol_version == PROTOCOL_VERSION => {
                send(Outgoing::Now(Message::HelloAck(HelloAck {
                    model_id: engine.model_id().to_string(),
                    capabilities: engine.capabilities().list(),
                    protocol_version: PROTOCOL_VERSION,
                })))?;
            }
            Ok(Some(Message::Hello(h))) => {
                send(Outgoing::Now(error(
                    codes::VERSION_MISMATCH,
                    format!("server speaks protocol {PROTOCOL_VERSION}, client sent {}", h.protocol_version),
                    None,
                )))?;
                return send(Outgoing::Close);
            }
            Ok(Some(Message::Status(_))) => {
                send(Outgoing::Now(status(engine, counters)))?;
                return send(Outgoing::Close);
            }
            Ok(Some(other)) => {
                send(Outgoing::Now(error(
                    codes::UNEXPECTED_FRAME,
                    format!("expected HELLO, got {:?}", other.kind()),
                    None,
                )))?;
                return send(Outgoing::Close);
            }
            Ok(None) => return send(Outgoing::Close),
            Err(e) => {
                send(Outgoing::Now(error(codes::MALFORMED_FRAME, e.to_string(), None)))?;
                return send(Outgoing::Close);
            }
        }

        let mut last_chunk: Option<u64> = None;
        loop {
            match Frame::read_from(&mut reader) {
                Ok(None) => return send(Outgoing::Close),
                Ok(Some(frame)) => match Message::from_frame(&frame) {
                    Ok(Message::RunChunk(chunk)) => {
                        if last_chunk.is_some_and(|last| chunk.chunk_id <= last) {
                            send(Outgoing::Now(error(
                                codes::CHUNK_ORDER,
                                "chunk ids must increase within a session",
                                Some(chunk.chunk_id),
                            )))?;
                            continue;
                        }
                        last_chunk = Some(chunk.chunk_id);
                        let (tx, rx) = mpsc::channel();
                        jobs.send(Job { queries: chunk.queries, reply: tx })
                            .map_err(|_| io::Error::other("execution queue closed"))?;
                        send(Outgoing::Chunk { chunk_id: chunk.chunk_id, result: rx })?;
                    }
                    Ok(Message::Status(_)) => send(Outgoing::Now(status(engine, counters)))?,
                    Ok(other) => send(Outgoing::Now(error(
                        codes::UNEXPECTED_FRAME,
                        format!("unexpected {:?} frame", other.kind()),
                        None,
                    )))?,
                    Err(e) => send(Outgoing::Now(error(codes::MALFORMED_FRAME, e.to_string(), None)))?,
                },
                // Framing is lost; report and close.
                Err(FrameError::Io(e)) => return Err(e),
                Err(e) => {
                    send(Outgoing::Now(error(codes::MALFORMED_FRAME, e.to_string(), None)))?;
                    return send(Outgoing::Close);
                }
            }
        }
    })();
    drop(out_tx);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn status(engine: &LocalEngine, counters: &Counters) -> Message {
    Message::Status(Status {
        model_id: Some(engine.model_id().to_string()),
        chunks_executed: Some(counters.chunks.load(Ordering::SeqCst)),
        active_sessions: Some(counters.sessions.load(Ordering::SeqCst)),
    })
}

fn write_loop(stream: TcpStream, outgoing: Receiver<Outgoing>) {
    let mut w = BufWriter::new(stream);
    for item in outgoing {
        let message = match item {
            Outgoing::Now(m) => m,
            Outgoing::Close => break,
            Outgoing::Chunk { chunk_id, result } => match result.recv() {
                Ok(Ok(responses)) => Message::ChunkResult(ChunkResult { chunk_id, responses }),
                Ok(Err(e)) => error(codes::BACKEND_FAILURE, e.to_string(), Some(chunk_id)),
                Err(_) => error(codes::BACKEND_FAILURE, "execution queue dropped the chunk", Some(chunk_id)),
            },
        };
        if message.write_to(&mut w).is_err() {
            break;
        }
    }
}
