//! Threaded CKMP server over a shared [`Registry`].

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use crate::error::{EdgeError, Result};
use crate::protocol::{read_frame, write_frame, Frame, FrameType};
use crate::registry::Registry;

/// Counters shared by all connections.
#[derive(Debug, Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
    pub weight_bytes_sent: AtomicU64,
}

#[derive(Default)]
struct Shared {
    stop: AtomicBool,
    stats: ServerStats,
    next_id: AtomicU64,
    live: Mutex<HashMap<u64, TcpStream>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// A running server; dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    registry: Arc<RwLock<Registry>>,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The served registry; publishing through it is visible to new requests.
    pub fn registry(&self) -> &Arc<RwLock<Registry>> {
        &self.registry
    }

    pub fn stats(&self) -> &ServerStats {
        &self.shared.stats
    }

    /// Stops accepting, closes open connections and waits for every worker.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else {
            return;
        };
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        let _ = acceptor.join();
        for stream in self.shared.live.lock().expect("live lock").values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let workers: Vec<_> = self
            .shared
            .workers
            .lock()
            .expect("workers lock")
            .drain(..)
            .collect();
        for w in workers {
            let _ = w.join();
        }
        info!("server on {} stopped", self.addr);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` and serves `registry` until shut down.
pub fn serve(registry: Arc<RwLock<Registry>>, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| EdgeError::Connect {
        addr: addr.to_string(),
        source: e,
    })?;
    let local = listener.local_addr()?;
    let shared = Arc::new(Shared::default());
    let acceptor = {
        let shared = Arc::clone(&shared);
        let registry = Arc::clone(&registry);
        thread::Builder::new()
            .name("ckmp-accept".into())
            .spawn(move || accept_loop(listener, registry, shared))?
    };
    info!(
        "serving {} model(s) on {local}",
        registry.read().expect("registry lock").list().len()
    );
    Ok(ServerHandle {
        addr: local,
        registry,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, registry: Arc<RwLock<Registry>>, shared: Arc<Shared>) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            shared.live.lock().expect("live lock").insert(id, clone);
        }
        shared.stats.connections.fetch_add(1, Ordering::Relaxed);
        let (registry, worker_shared) = (Arc::clone(&registry), Arc::clone(&shared));
        let spawned = thread::Builder::new()
            .name(format!("ckmp-conn-{id}"))
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, &registry, &worker_shared.stats) {
                    debug!("connection {peer:?} ended: {e}");
                }
                worker_shared.live.lock().expect("live lock").remove(&id);
            });
        match spawned {
            Ok(h) => {
                let mut workers = shared.workers.lock().expect("workers lock");
                workers.retain(|w| !w.is_finished());
                workers.push(h);
            }
            Err(e) => warn!("could not spawn connection worker: {e}"),
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    registry: &RwLock<Registry>,
    stats: &ServerStats,
) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                // Framing is lost; report and hang up.
                let _ = write_frame(&mut writer, &Frame::error(&e.to_string()));
                return Err(e);
            }
        };
        stats.requests.fetch_add(1, Ordering::Relaxed);
        let reply =
            respond(&frame, registry, stats).unwrap_or_else(|e| Frame::error(&e.to_string()));
        write_frame(&mut writer, &reply)?;
    }
}

fn respond(frame: &Frame, registry: &RwLock<Registry>, stats: &ServerStats) -> Result<Frame> {
    let reg = registry.read().expect("registry lock");
    match frame.kind {
        FrameType::ListReq => Ok(Frame::new(
            FrameType::ListResp,
            serde_json::to_vec(reg.list())?,
        )),
        FrameType::GetManifest => {
            let m = reg.manifest(frame.text()?)?;
            Ok(Frame::new(FrameType::Manifest, serde_json::to_vec(m)?))
        }
        FrameType::GetWeights => {
            let payload = reg.payload(frame.text()?)?;
            stats
                .weight_bytes_sent
                .fetch_add(payload.len() as u64, Ordering::Relaxed);
            Ok(Frame::new(FrameType::Weights, payload.as_slice()))
        }
        other => Err(EdgeError::protocol(format!("{other:?} is not a request"))),
    }
}
