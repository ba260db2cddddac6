//! Thread-per-connection framed TCP server used by the registry and service hosts.

use std::collections::HashMap;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use crate::wire::{self, Envelope, MsgType, WireError};

pub(crate) type Handler = Arc<dyn Fn(&Envelope) -> Envelope + Send + Sync>;

pub(crate) struct FrameServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl FrameServer {
    pub(crate) fn bind(listen: &str, handler: Handler) -> io::Result<FrameServer> {
        let listener = TcpListener::bind(wire::resolve_addr(listen)?)?;
        Self::serve(listener, handler)
    }

    pub(crate) fn serve(listener: TcpListener, handler: Handler) -> io::Result<FrameServer> {
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();

        let accept_thread = {
            let shutdown = Arc::clone(&shutdown);
            let conns = Arc::clone(&conns);
            thread::Builder::new()
                .name(format!("accept-{addr}"))
                .spawn(move || accept_loop(listener, handler, shutdown, conns))?
        };

        Ok(FrameServer {
            addr,
            shutdown,
            conns,
            accept_thread: Some(accept_thread),
        })
    }

    pub(crate) fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Closes the listener and every open connection. Idempotent.
    pub(crate) fn stop(&mut self) {
        if self.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(IpAddr::V4(Ipv4Addr::LOCALHOST));
        }
        let _ = TcpStream::connect_timeout(&wake, wire::DEFAULT_IO_TIMEOUT);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        for (_, s) in self.conns.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for FrameServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(
    listener: TcpListener,
    handler: Handler,
    shutdown: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
) {
    let next_conn = AtomicU64::new(0);
    for stream in listener.incoming() {
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            conns.lock().unwrap().insert(id, clone);
        }
        let handler = Arc::clone(&handler);
        let shutdown = Arc::clone(&shutdown);
        let conns = Arc::clone(&conns);
        let spawned = thread::Builder::new().spawn(move || {
            serve_connection(stream, &*handler, &shutdown);
            conns.lock().unwrap().remove(&id);
        });
        if let Err(e) = spawned {
            log::error!("could not spawn connection thread: {e}");
        }
    }
}

fn serve_connection(
    mut stream: TcpStream,
    handler: &(dyn Fn(&Envelope) -> Envelope + Send + Sync),
    shutdown: &AtomicBool,
) {
    loop {
        let req = match wire::decode_frame(&mut stream) {
            Ok(req) => req,
            Err(WireError::Eof) => return,
            Err(WireError::MalformedPayload(msg)) => {
                let err = Envelope::new(
                    MsgType::Err,
                    0,
                    serde_json::json!({"code": "MALFORMED", "message": msg}),
                );
                let _ = wire::write_frame(&mut stream, &err);
                return;
            }
            Err(e) => {
                log::debug!("connection dropped: {e}");
                return;
            }
        };
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        let resp = handler(&req);
        if shutdown.load(Ordering::SeqCst) {
            return;
        }
        if let Err(e) = wire::write_frame(&mut stream, &resp) {
            log::debug!("write failed: {e}");
            return;
        }
    }
}
