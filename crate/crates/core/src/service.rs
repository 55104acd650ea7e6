//! Line-delimited JSON service over TCP exposing the decision engine.
//!
//! Each request is one JSON object per line with an `op` field; each response
//! is one JSON object per line with a `type` field. Connections are served on
//! their own threads up to a configured limit; extra connections receive a
//! `busy` error and are closed. Shutdown stops accepting, lets every request
//! already read run to completion, then closes idle connections.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backbone::TravelTimeModel;
use crate::error::{Error, Result};
use crate::interval::CheckpointProfile;
use crate::route::Route;
use crate::ugd::{CallStats, EnRouteAnswer, EnRouteQuery, RemainingMode, TteStore};

const POLL_INTERVAL: Duration = Duration::from_millis(20);
const MAX_LINE_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub max_connections: usize,
    /// Checkpoint count used when a pre-route request omits `k`.
    pub default_k: usize,
    pub mode: RemainingMode,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: "127.0.0.1:7878".into(),
            max_connections: 64,
            default_k: 10,
            mode: RemainingMode::Profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Preroute {
        route: Route,
        #[serde(default)]
        k: Option<usize>,
    },
    Enroute(EnRouteQuery),
    Stats,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Profile { profile: CheckpointProfile },
    Answer { answer: EnRouteAnswer },
    Stats { stats: CallStats, live_profiles: usize },
    ShuttingDown,
    Error { kind: String, message: String },
}

impl Response {
    pub fn from_error(err: &Error) -> Self {
        Response::Error { kind: err.kind().to_string(), message: err.to_string() }
    }
}

/// Clonable trigger for graceful shutdown.
#[derive(Debug, Clone, Default)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn trigger(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_triggered(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct Server<M> {
    listener: TcpListener,
    store: Arc<TteStore>,
    model: Arc<M>,
    config: ServiceConfig,
    shutdown: ShutdownHandle,
}

impl<M: TravelTimeModel + 'static> Server<M> {
    pub fn bind(model: Arc<M>, config: ServiceConfig) -> Result<Self> {
        if config.max_connections == 0 || config.default_k == 0 {
            return Err(Error::Config("max_connections and default_k must be >= 1".into()));
        }
        let listener = TcpListener::bind(&config.addr)?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            listener,
            store: Arc::new(TteStore::new(config.mode)),
            model,
            config,
            shutdown: ShutdownHandle::default(),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.shutdown.clone()
    }

    pub fn store(&self) -> Arc<TteStore> {
        Arc::clone(&self.store)
    }

    /// Serves until shutdown is triggered, then waits for every connection
    /// to finish and returns the final counters.
    pub fn run(self) -> Result<CallStats> {
        let active = Arc::new(AtomicUsize::new(0));
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.shutdown.is_triggered() {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    workers.retain(|h| !h.is_finished());
                    if active.load(Ordering::SeqCst) >= self.config.max_connections {
                        reject_busy(stream);
                        continue;
                    }
                    active.fetch_add(1, Ordering::SeqCst);
                    let conn = Connection {
                        store: Arc::clone(&self.store),
                        model: Arc::clone(&self.model),
                        shutdown: self.shutdown.clone(),
                        default_k: self.config.default_k,
                    };
                    let active = Arc::clone(&active);
                    workers.push(std::thread::spawn(move || {
                        // a broken client connection only ends that connection
                        let _ = conn.serve(stream);
                        active.fetch_sub(1, Ordering::SeqCst);
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL_INTERVAL),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        for w in workers {
            w.join().map_err(|_| Error::State("connection thread panicked".into()))?;
        }
        Ok(self.store.call_stats())
    }
}

fn reject_busy(mut stream: TcpStream) {
    let resp = Response::Error { kind: "busy".into(), message: "connection limit reached".into() };
    if let Ok(mut line) = serde_json::to_vec(&resp) {
        line.push(b'\n');
        let _ = stream.write_all(&line);
    }
}

struct Connection<M> {
    store: Arc<TteStore>,
    model: Arc<M>,
    shutdown: ShutdownHandle,
    default_k: usize,
}

impl<M: TravelTimeModel> Connection<M> {
    fn serve(&self, stream: TcpStream) -> Result<()> {
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(POLL_INTERVAL))?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut buf = Vec::new();
        loop {
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) if buf.is_empty() => return Ok(()),
                Ok(_) if buf.ends_with(b"\n") => {
                    let resp = self.handle_line(&buf);
                    buf.clear();
                    let mut out = serde_json::to_vec(&resp)?;
                    out.push(b'\n');
                    writer.write_all(&out)?;
                    writer.flush()?;
                }
                // EOF in the middle of a line: answer it, then stop
                Ok(_) => {
                    let resp = self.handle_line(&buf);
                    let mut out = serde_json::to_vec(&resp)?;
                    out.push(b'\n');
                    writer.write_all(&out)?;
                    return Ok(());
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if buf.len() > MAX_LINE_BYTES {
                        let resp = Response::Error { kind: "parse".into(), message: "request line too long".into() };
                        writer.write_all(&serde_json::to_vec(&resp)?)?;
                        writer.write_all(b"\n")?;
                        return Ok(());
                    }
                    if self.shutdown.is_triggered() && buf.is_empty() {
                        return Ok(());
                    }
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn handle_line(&self, line: &[u8]) -> Response {
        let text = String::from_utf8_lossy(line);
        let text = text.trim();
        if text.is_empty() {
            return Response::Error { kind: "parse".into(), message: "empty request".into() };
        }
        let req: Request = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return Response::Error { kind: "parse".into(), message: e.to_string() },
        };
        self.handle(req).unwrap_or_else(|e| Response::from_error(&e))
    }

    fn handle(&self, req: Request) -> Result<Response> {
        match req {
            Request::Preroute { route, k } => {
                let created_at = route.departure_ts;
                let profile = self.store.preroute(
                    self.model.as_ref(),
                    Arc::new(route),
                    k.unwrap_or(self.default_k),
                    created_at,
                )?;
                Ok(Response::Profile { profile })
            }
            Request::Enroute(query) => {
                let answer = self.store.enroute(self.model.as_ref(), &query)?;
                Ok(Response::Answer { answer })
            }
            Request::Stats => Ok(Response::Stats { stats: self.store.call_stats(), live_profiles: self.store.len() }),
            Request::Shutdown => {
                self.shutdown.trigger();
                Ok(Response::ShuttingDown)
            }
        }
    }
}
