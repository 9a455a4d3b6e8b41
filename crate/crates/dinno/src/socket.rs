//! TCP transport: every peer listens on its own port, dials every other
//! peer, and exchanges length-prefixed protocol frames.
//!
//! Outgoing frames go over the dialed connections; frames arriving on
//! accepted connections are decoded by one reader thread per connection and
//! funnelled into a single queue.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use dinno_core::protocol::{decode_header, wire_decode, wire_encode, PeerId, PeerMessage, Transport, WireError, WireLayout, HEADER_LEN};

#[derive(Debug, thiserror::Error)]
pub enum SocketError {
    #[error("socket I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Wire(#[from] WireError),
    #[error("no message within {0:?}")]
    Timeout(Duration),
    #[error("all peers disconnected")]
    Disconnected,
    #[error("could not reach peer {peer} at {addr} within {waited:?}")]
    Connect { peer: PeerId, addr: SocketAddr, waited: Duration },
    #[error("unexpected handshake from {0}")]
    Handshake(SocketAddr),
}

type Inbound = Result<PeerMessage, SocketError>;

pub struct SocketTransport {
    id: PeerId,
    outgoing: Vec<Arc<Mutex<TcpStream>>>,
    inbox: Receiver<Inbound>,
    timeout: Duration,
}

fn read_frame(stream: &mut TcpStream, layout: &WireLayout) -> Result<Option<PeerMessage>, SocketError> {
    let mut header = [0u8; HEADER_LEN];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let h = decode_header(&header)?;
    let mut frame = vec![0u8; h.frame_len()];
    frame[..HEADER_LEN].copy_from_slice(&header);
    stream.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(Some(wire_decode(&frame, layout)?))
}

fn reader(mut stream: TcpStream, layout: WireLayout, tx: Sender<Inbound>) {
    loop {
        match read_frame(&mut stream, &layout) {
            Ok(Some(m)) => {
                if tx.send(Ok(m)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
}

impl SocketTransport {
    /// Binds `addrs[id]`, dials every other address (retrying until
    /// `connect_deadline`) and waits for every other peer to dial in.
    pub fn connect(
        id: PeerId,
        addrs: &[SocketAddr],
        layout: WireLayout,
        timeout: Duration,
        connect_deadline: Duration,
    ) -> Result<Self, SocketError> {
        let listener = TcpListener::bind(addrs[id as usize])?;
        Self::with_listener(id, listener, addrs, layout, timeout, connect_deadline)
    }

    pub fn with_listener(
        id: PeerId,
        listener: TcpListener,
        addrs: &[SocketAddr],
        layout: WireLayout,
        timeout: Duration,
        connect_deadline: Duration,
    ) -> Result<Self, SocketError> {
        let n = addrs.len();
        let (tx, inbox) = mpsc::channel();
        let accept_tx = tx.clone();
        thread::spawn(move || {
            for _ in 0..n - 1 {
                let accepted = listener.accept().and_then(|(mut s, from)| {
                    let mut hello = [0u8; 4];
                    s.read_exact(&mut hello)?;
                    if u32::from_le_bytes(hello) as usize >= n {
                        return Err(std::io::Error::other(SocketError::Handshake(from)));
                    }
                    s.set_nodelay(true)?;
                    Ok(s)
                });
                match accepted {
                    Ok(s) => {
                        let tx = accept_tx.clone();
                        thread::spawn(move || reader(s, layout, tx));
                    }
                    Err(e) => {
                        let _ = accept_tx.send(Err(e.into()));
                        return;
                    }
                }
            }
        });
        drop(tx);

        let start = Instant::now();
        let mut outgoing = Vec::with_capacity(n - 1);
        for (peer, &addr) in addrs.iter().enumerate() {
            if peer == id as usize {
                continue;
            }
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(_) if start.elapsed() < connect_deadline => thread::sleep(Duration::from_millis(20)),
                    Err(_) => {
                        return Err(SocketError::Connect { peer: peer as PeerId, addr, waited: start.elapsed() })
                    }
                }
            };
            stream.set_nodelay(true)?;
            (&stream).write_all(&id.to_le_bytes())?;
            outgoing.push(Arc::new(Mutex::new(stream)));
        }
        Ok(Self { id, outgoing, inbox, timeout })
    }

    pub fn id(&self) -> PeerId {
        self.id
    }
}

impl Transport for SocketTransport {
    type Error = SocketError;

    fn broadcast(&mut self, msg: &PeerMessage) -> Result<(), SocketError> {
        let frame = wire_encode(msg)?;
        for s in &self.outgoing {
            s.lock().expect("writer lock").write_all(&frame)?;
        }
        Ok(())
    }

    fn receive(&mut self) -> Result<PeerMessage, SocketError> {
        match self.inbox.recv_timeout(self.timeout) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) => Err(SocketError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(SocketError::Disconnected),
        }
    }
}

/// Addresses `host:base_port + i` for `n` peers.
pub fn peer_addrs(host: &str, base_port: u16, n: usize) -> Result<Vec<SocketAddr>, std::io::Error> {
    use std::net::ToSocketAddrs;
    (0..n)
        .map(|i| {
            let port = base_port
                .checked_add(i as u16)
                .ok_or_else(|| std::io::Error::other("port range overflows"))?;
            (host, port)
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| std::io::Error::other(format!("cannot resolve {host}")))
        })
        .collect()
}

/// A base port with `n` consecutive ports free at the time of the call.
pub fn free_port_range(host: &str, n: usize) -> Result<u16, std::io::Error> {
    for _ in 0..64 {
        let probe = TcpListener::bind((host, 0))?;
        let base = probe.local_addr()?.port();
        drop(probe);
        if base as usize + n > u16::MAX as usize {
            continue;
        }
        let all_free = (0..n as u16).all(|i| TcpListener::bind((host, base + i)).is_ok());
        if all_free {
            return Ok(base);
        }
    }
    Err(std::io::Error::other("no free port range found"))
}
