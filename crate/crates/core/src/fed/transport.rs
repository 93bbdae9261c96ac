//! Server/client links carrying encoded frames, in-process or over TCP.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::wire::{Frame, MsgType};
use super::FedError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in_process" | "inprocess" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport {other:?} (expected in_process or tcp)")),
        }
    }
}

/// One end of a bidirectional frame channel.
pub trait Link: Send {
    /// Sends a frame and returns the bytes placed on the transport.
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError>;
    fn recv(&mut self) -> Result<Frame, FedError>;
    fn bytes_sent(&self) -> u64;
    fn bytes_received(&self) -> u64;
}

#[derive(Debug, Default)]
struct Counters {
    sent: AtomicU64,
    received: AtomicU64,
}

/// Channel link carrying the encoded bytes of each frame.
pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    counters: Arc<Counters>,
}

impl ChannelLink {
    pub fn pair() -> (ChannelLink, ChannelLink) {
        let (tx_a, rx_b) = channel();
        let (tx_b, rx_a) = channel();
        (
            ChannelLink { tx: tx_a, rx: rx_a, counters: Arc::default() },
            ChannelLink { tx: tx_b, rx: rx_b, counters: Arc::default() },
        )
    }
}

impl Link for ChannelLink {
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError> {
        let bytes = frame.encode();
        let n = bytes.len();
        self.tx.send(bytes).map_err(|_| FedError::Transport("peer channel closed".into()))?;
        self.counters.sent.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }

    fn recv(&mut self) -> Result<Frame, FedError> {
        let bytes = self.rx.recv().map_err(|_| FedError::Transport("peer channel closed".into()))?;
        self.counters.received.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Frame::decode(&bytes)
    }

    fn bytes_sent(&self) -> u64 {
        self.counters.sent.load(Ordering::Relaxed)
    }

    fn bytes_received(&self) -> u64 {
        self.counters.received.load(Ordering::Relaxed)
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    sent: u64,
    received: u64,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<TcpLink, FedError> {
        let io = |e: std::io::Error| FedError::Transport(e.to_string());
        stream.set_nodelay(true).map_err(io)?;
        let reader = BufReader::new(stream.try_clone().map_err(io)?);
        Ok(TcpLink { reader, writer: BufWriter::new(stream), sent: 0, received: 0 })
    }

    pub fn connect(addr: std::net::SocketAddr) -> Result<TcpLink, FedError> {
        TcpLink::new(TcpStream::connect(addr).map_err(|e| FedError::Transport(format!("connect {addr}: {e}")))?)
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &Frame) -> Result<usize, FedError> {
        let n = frame.write_to(&mut self.writer)?;
        self.sent += n as u64;
        Ok(n)
    }

    fn recv(&mut self) -> Result<Frame, FedError> {
        let f = Frame::read_from(&mut self.reader)?;
        self.received += f.wire_len() as u64;
        Ok(f)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

/// Accepts `num_clients` connections and orders them by the id in each
/// client's HELLO.
pub fn accept_clients(listener: &TcpListener, num_clients: usize) -> Result<Vec<Box<dyn Link>>, FedError> {
    let mut slots: Vec<Option<Box<dyn Link>>> = (0..num_clients).map(|_| None).collect();
    for _ in 0..num_clients {
        let (stream, _) = listener.accept().map_err(|e| FedError::Transport(format!("accept: {e}")))?;
        let mut link = TcpLink::new(stream)?;
        let hello = link.recv()?;
        if hello.kind != MsgType::Hello {
            return Err(FedError::Protocol(format!("expected HELLO, got {:?}", hello.kind)));
        }
        let id = hello.payload_u32()? as usize;
        match slots.get_mut(id) {
            Some(slot @ None) => *slot = Some(Box::new(link)),
            Some(Some(_)) => return Err(FedError::Protocol(format!("client {id} connected twice"))),
            None => return Err(FedError::Protocol(format!("unknown client id {id}"))),
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_counts_bytes() {
        let (mut a, mut b) = ChannelLink::pair();
        let f = Frame::new(MsgType::GlobalModel, vec![0; 10]);
        assert_eq!(a.send(&f).unwrap(), 16);
        assert_eq!(b.recv().unwrap(), f);
        assert_eq!((a.bytes_sent(), b.bytes_received()), (16, 16));
        drop(b);
        assert!(a.send(&f).is_err());
        assert!(a.recv().is_err());
    }

    #[test]
    fn tcp_handshake_orders_by_id() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handles: Vec<_> = [2u32, 0, 1]
            .into_iter()
            .map(|id| {
                std::thread::spawn(move || {
                    let mut link = TcpLink::connect(addr).unwrap();
                    link.send(&Frame::hello(id)).unwrap();
                    (id, link.recv().unwrap().payload_u32().unwrap())
                })
            })
            .collect();
        let mut links = accept_clients(&listener, 3).unwrap();
        for (i, link) in links.iter_mut().enumerate() {
            link.send(&Frame::round_done(i as u32)).unwrap();
        }
        for h in handles {
            let (id, echoed) = h.join().unwrap();
            assert_eq!(id, echoed);
        }
        assert_eq!(links[0].bytes_received(), 10);
    }
}
