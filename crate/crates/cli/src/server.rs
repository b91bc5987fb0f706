//! TCP front end: one thread per connection, every data command routed
//! through the shared executor. Pipelined requests already buffered on a
//! connection are submitted together and answered in order.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use thiserror::Error;
use tierkv_core::elastic_exec::{ControllerHandle, Executor};
use tierkv_core::tier_sync::{Command, FlusherHandle, Reply, Request, SyncPolicy, TieredStore};

use crate::config::{ConfigError, ExecSetting, ServerConfig};
use crate::protocol::{parse_request, read_line, WireRequest, MAX_LINE_LEN};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
}

#[derive(Debug, Default)]
struct ServerCounters {
    connections_total: AtomicU64,
    connections_active: AtomicU64,
    cmd_get: AtomicU64,
    cmd_set: AtomicU64,
    cmd_del: AtomicU64,
    protocol_errors: AtomicU64,
    store_errors: AtomicU64,
}

struct Shared {
    exec: Executor<TieredStore>,
    counters: ServerCounters,
    max_connections: usize,
    stop: AtomicBool,
    streams: Mutex<Vec<(u64, TcpStream)>>,
}

/// A running server. Dropping it does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
    _flusher: Option<FlusherHandle>,
    _controller: Option<ControllerHandle>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<TieredStore> {
        self.shared.exec.service()
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, closes open connections and stops the executor.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self._controller.take();
        self.shared.exec.shutdown();
    }
}

/// Binds and starts serving in background threads.
pub fn start(config: &ServerConfig) -> Result<ServerHandle, ServeError> {
    let store = config.build_store()?;
    let listener = TcpListener::bind(&config.listen).map_err(|source| ServeError::BindFailure {
        addr: config.listen.clone(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| ServeError::BindFailure {
        addr: config.listen.clone(),
        source,
    })?;
    let flusher = (store.policy() == SyncPolicy::WriteBack).then(|| store.spawn_flusher());
    let exec = Executor::start(store, config.initial_mode());
    let controller = (config.exec == ExecSetting::Elastic).then(|| exec.spawn_controller(config.elastic.clone()));
    let shared = Arc::new(Shared {
        exec,
        counters: ServerCounters::default(),
        max_connections: config.max_connections,
        stop: AtomicBool::new(false),
        streams: Mutex::new(Vec::new()),
    });
    let s2 = shared.clone();
    let accept = thread::Builder::new()
        .name("tierkv-accept".into())
        .spawn(move || accept_loop(listener, s2))
        .expect("spawn accept loop");
    log::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
        _flusher: flusher,
        _controller: controller,
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = stream else { continue };
        let c = &shared.counters;
        if c.connections_active.load(Ordering::SeqCst) as usize >= shared.max_connections {
            let _ = stream.write_all(b"-ERR too many connections\n");
            continue;
        }
        let id = c.connections_total.fetch_add(1, Ordering::SeqCst) + 1;
        c.connections_active.fetch_add(1, Ordering::SeqCst);
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            shared.streams.lock().unwrap().push((id, clone));
        }
        let s = shared.clone();
        let spawned = thread::Builder::new()
            .name(format!("tierkv-conn-{id}"))
            .spawn(move || {
                if let Err(e) = serve_connection(id, stream, &s) {
                    log::debug!("connection {id} ended: {e}");
                }
                s.streams.lock().unwrap().retain(|(i, _)| *i != id);
                s.counters.connections_active.fetch_sub(1, Ordering::SeqCst);
            });
        if spawned.is_err() {
            shared.counters.connections_active.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

enum Item {
    Data(Command),
    Immediate(Vec<u8>),
    Stats,
    Quit,
}

fn reply_line(r: Reply, c: &ServerCounters) -> Vec<u8> {
    match r {
        Reply::Ok => b"+OK\n".to_vec(),
        Reply::Value(None) => b"$-\n".to_vec(),
        Reply::Value(Some(v)) => format!("${}\n", B64.encode(v)).into_bytes(),
        Reply::Integer(n) => format!(":{n}\n").into_bytes(),
        Reply::Err(e) => {
            c.store_errors.fetch_add(1, Ordering::Relaxed);
            format!("-ERR {e}\n").into_bytes()
        }
    }
}

const PIPELINE_MAX: usize = 256;

fn serve_connection(id: u64, stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        // one blocking read, then whatever complete lines are already buffered
        let mut items = Vec::new();
        loop {
            let line = match read_line(&mut reader, MAX_LINE_LEN) {
                Ok(Some(l)) => l,
                Ok(None) if items.is_empty() => return Ok(()),
                Ok(None) => break,
                Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                    writer.write_all(b"-ERR line too long\n")?;
                    writer.flush()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let c = &shared.counters;
            let item = match parse_request(&line) {
                Ok(WireRequest::Set(k, v)) => {
                    c.cmd_set.fetch_add(1, Ordering::Relaxed);
                    Item::Data(Command::Set(k, v))
                }
                Ok(WireRequest::Get(k)) => {
                    c.cmd_get.fetch_add(1, Ordering::Relaxed);
                    Item::Data(Command::Get(k))
                }
                Ok(WireRequest::Del(k)) => {
                    c.cmd_del.fetch_add(1, Ordering::Relaxed);
                    Item::Data(Command::Del(k))
                }
                Ok(WireRequest::Stats) => Item::Stats,
                Ok(WireRequest::Quit) => Item::Quit,
                Err(msg) => {
                    c.protocol_errors.fetch_add(1, Ordering::Relaxed);
                    Item::Immediate(format!("-ERR {msg}\n").into_bytes())
                }
            };
            let quit = matches!(item, Item::Quit);
            items.push(item);
            if quit || items.len() >= PIPELINE_MAX || !reader.buffer().contains(&b'\n') {
                break;
            }
        }
        if answer(id, items, shared, &mut writer)? {
            return Ok(());
        }
    }
}

/// Executes a pipeline in order; true when the client asked to quit.
fn answer(id: u64, items: Vec<Item>, shared: &Shared, w: &mut impl Write) -> io::Result<bool> {
    let mut pending: Vec<Command> = Vec::new();
    let flush_data = |pending: &mut Vec<Command>, w: &mut dyn Write| -> io::Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let reqs = pending.drain(..).map(|c| Request::new(id, c)).collect();
        let replies = shared
            .exec
            .call_many(reqs)
            .map_err(|e| io::Error::other(e.to_string()))?;
        for r in replies {
            w.write_all(&reply_line(r, &shared.counters))?;
        }
        Ok(())
    };
    for item in items {
        match item {
            Item::Data(c) => pending.push(c),
            Item::Immediate(bytes) => {
                flush_data(&mut pending, w)?;
                w.write_all(&bytes)?;
            }
            Item::Stats => {
                flush_data(&mut pending, w)?;
                w.write_all(stats_text(shared).as_bytes())?;
            }
            Item::Quit => {
                flush_data(&mut pending, w)?;
                w.write_all(b"+OK\n")?;
                w.flush()?;
                return Ok(true);
            }
        }
    }
    flush_data(&mut pending, w)?;
    w.flush()?;
    Ok(false)
}

fn stats_text(shared: &Shared) -> String {
    let c = &shared.counters;
    let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
    let st = shared.exec.service().stats();
    let ex = shared.exec.stats();
    let mode = shared
        .exec
        .mode()
        .map_or_else(|_| "stopped".to_string(), |m| m.to_string());
    let rows: Vec<(&str, String)> = vec![
        ("connections_active", l(&c.connections_active).to_string()),
        ("connections_total", l(&c.connections_total).to_string()),
        ("cmd_get", l(&c.cmd_get).to_string()),
        ("cmd_set", l(&c.cmd_set).to_string()),
        ("cmd_del", l(&c.cmd_del).to_string()),
        ("protocol_errors", l(&c.protocol_errors).to_string()),
        ("store_errors", l(&c.store_errors).to_string()),
        ("reads", st.sync.reads.to_string()),
        ("cache_hits", st.sync.hits.to_string()),
        ("cache_misses", st.sync.misses.to_string()),
        ("cache_entries", st.cache.entries.to_string()),
        ("cache_bytes_used", st.cache.bytes_used.to_string()),
        ("cache_bytes_capacity", st.cache.bytes_capacity.to_string()),
        ("cache_evictions", st.cache.evictions.to_string()),
        ("dirty_bytes", st.dirty_bytes.to_string()),
        ("storage_reads", (st.storage.reads + st.storage.multi_reads).to_string()),
        ("storage_writes", st.storage.writes.to_string()),
        ("storage_batches", st.storage.batches.to_string()),
        ("write_failures", st.sync.write_failures.to_string()),
        ("backpressure_events", st.sync.backpressure_events.to_string()),
        ("flushes", st.sync.flushes.to_string()),
        ("flush_retries", st.sync.flush_retries.to_string()),
        ("exec_mode", mode),
        ("exec_completed", ex.completed.to_string()),
        ("exec_transitions", ex.transitions.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in rows {
        out.push_str(k);
        out.push(' ');
        out.push_str(&v);
        out.push('\n');
    }
    out.push_str(".\n");
    out
}
