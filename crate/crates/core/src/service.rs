//! Runs the proxy on real sockets: a TCP listener for signaling and one UDP socket
//! per relay port. Virtual time is taken from a monotonic clock started at launch.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use crate::connection::ConnectionId;
use crate::proxy::{Outbound, Proxy, ProxyConfig, ProxyError, TickAction};
use crate::sip::{FrameDecoder, TransportAddress};
use crate::time::SimTime;

const POLL: Duration = Duration::from_millis(50);
const TICK: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Where the SIP listener binds; port 0 picks a free port.
    pub listen: SocketAddrV4,
    /// Address relay sockets bind to.
    pub media_bind: Ipv4Addr,
    pub proxy: ProxyConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("binding {what}: {source}")]
    Bind { what: String, source: io::Error },
}

struct Shared {
    proxy: Mutex<Proxy>,
    streams: Mutex<BTreeMap<ConnectionId, TcpStream>>,
    relays: BTreeMap<u16, UdpSocket>,
    started: Instant,
    stop: AtomicBool,
}

impl Shared {
    fn now(&self) -> SimTime {
        SimTime::from_millis(self.started.elapsed().as_millis() as u64)
    }

    fn proxy(&self) -> MutexGuard<'_, Proxy> {
        self.proxy.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn send(&self, out: Vec<Outbound>) {
        let mut streams = self.streams.lock().unwrap_or_else(|p| p.into_inner());
        for o in out {
            let Some(stream) = streams.get_mut(&o.conn) else {
                debug!(conn = %o.conn, "dropping message for closed connection");
                continue;
            };
            if let Err(e) = stream.write_all(&o.bytes) {
                warn!(conn = %o.conn, error = %e, "write failed");
            }
        }
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

/// A running service. Dropping it without calling `shutdown` leaves threads running.
pub struct ServiceHandle {
    shared: Arc<Shared>,
    sip_addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn sip_addr(&self) -> SocketAddr {
        self.sip_addr
    }

    /// Runs `f` against the proxy while holding its lock.
    pub fn with_proxy<R>(&self, f: impl FnOnce(&Proxy) -> R) -> R {
        f(&self.shared.proxy())
    }

    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for s in self.shared.streams.lock().unwrap_or_else(|p| p.into_inner()).values() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the service stops.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub fn spawn(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let proxy = Proxy::new(config.proxy.clone())?;
    let listener = TcpListener::bind(config.listen).map_err(|source| ServiceError::Bind {
        what: format!("SIP listener {}", config.listen),
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServiceError::Bind { what: "listener mode".into(), source })?;
    let sip_addr = listener
        .local_addr()
        .map_err(|source| ServiceError::Bind { what: "listener address".into(), source })?;

    let (lo, hi) = config.proxy.media_port_range;
    let mut relays = BTreeMap::new();
    for port in lo..=hi {
        let addr = SocketAddrV4::new(config.media_bind, port);
        let sock = UdpSocket::bind(addr).map_err(|source| ServiceError::Bind {
            what: format!("relay port {addr}"),
            source,
        })?;
        sock.set_read_timeout(Some(POLL))
            .map_err(|source| ServiceError::Bind { what: "relay timeout".into(), source })?;
        relays.insert(port, sock);
    }

    let shared = Arc::new(Shared {
        proxy: Mutex::new(proxy),
        streams: Mutex::new(BTreeMap::new()),
        relays,
        started: Instant::now(),
        stop: AtomicBool::new(false),
    });
    info!(%sip_addr, media = ?(lo, hi), "service listening");

    let mut threads = Vec::new();
    {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || accept_loop(shared, listener)));
    }
    {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || tick_loop(shared)));
    }
    for &port in shared.relays.keys() {
        let shared = Arc::clone(&shared);
        threads.push(thread::spawn(move || relay_loop(shared, port)));
    }
    Ok(ServiceHandle { shared, sip_addr, threads })
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    let mut readers = Vec::new();
    while !shared.stopped() {
        match listener.accept() {
            Ok((stream, SocketAddr::V4(remote))) => {
                let remote = match TransportAddress::new(*remote.ip(), remote.port()) {
                    Ok(r) => r,
                    Err(_) => continue,
                };
                let (Ok(writer), Ok(())) = (stream.try_clone(), stream.set_read_timeout(Some(POLL))) else {
                    continue;
                };
                let conn = shared.proxy().accept(remote);
                shared.streams.lock().unwrap_or_else(|p| p.into_inner()).insert(conn, writer);
                let shared = Arc::clone(&shared);
                readers.push(thread::spawn(move || read_loop(shared, conn, stream)));
            }
            Ok(_) => debug!("ignoring IPv6 peer"),
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                warn!(error = %e, "accept failed");
                thread::sleep(POLL);
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

fn read_loop(shared: Arc<Shared>, conn: ConnectionId, mut stream: TcpStream) {
    let mut decoder = FrameDecoder::new();
    let mut buf = [0u8; 8192];
    'outer: while !shared.stopped() {
        let n = match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                debug!(%conn, error = %e, "read failed");
                break;
            }
        };
        decoder.push(&buf[..n]);
        loop {
            match decoder.next_frame() {
                Ok(Some(frame)) => {
                    let out = shared.proxy().handle_message(conn, &frame, shared.now());
                    shared.send(out);
                }
                Ok(None) => break,
                Err(e) => {
                    warn!(%conn, error = %e, "framing error, closing");
                    break 'outer;
                }
            }
        }
    }
    shared.streams.lock().unwrap_or_else(|p| p.into_inner()).remove(&conn);
    shared.proxy().close(conn);
    debug!(%conn, "connection closed");
}

fn tick_loop(shared: Arc<Shared>) {
    let mut next = Instant::now() + TICK;
    while !shared.stopped() {
        if Instant::now() < next {
            thread::sleep(POLL);
            continue;
        }
        next += TICK;
        let actions = shared.proxy().tick(shared.now());
        for a in actions {
            match a {
                TickAction::RegistrationExpired(aor) => info!(%aor, "registration expired"),
                TickAction::InviteTimedOut { call_id, response } => {
                    info!(%call_id, "INVITE timed out");
                    shared.send(response.into_iter().collect());
                }
            }
        }
    }
}

fn relay_loop(shared: Arc<Shared>, port: u16) {
    let sock = &shared.relays[&port];
    let mut buf = [0u8; 2048];
    while !shared.stopped() {
        let (n, src) = match sock.recv_from(&mut buf) {
            Ok((n, SocketAddr::V4(src))) => (n, src),
            Ok(_) => continue,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                debug!(port, error = %e, "relay receive failed");
                continue;
            }
        };
        let Ok(src) = TransportAddress::new(*src.ip(), src.port()) else {
            continue;
        };
        let decision = shared.proxy().handle_media(port, src, &buf[..n], shared.now());
        for f in decision.forwards {
            let Some(out) = shared.relays.get(&f.from_port) else {
                continue;
            };
            if let Err(e) = out.send_to(&f.datagram, SocketAddr::from(f.to)) {
                debug!(to = %f.to, error = %e, "relay send failed");
            }
        }
    }
}
