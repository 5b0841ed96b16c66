use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::protocol::FrameReader;
use crate::error::{Error, Result};

/// Ordered, reliable, bidirectional frame stream for one site session.
pub trait Transport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;

    /// Next frame; `Ok(None)` once `timeout` elapses. `None` waits forever.
    /// A closed peer is an error.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>>;

    /// Total bytes successfully handed to the peer.
    fn bytes_sent(&self) -> u64;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        (**self).recv(timeout)
    }

    fn bytes_sent(&self) -> u64 {
        (**self).bytes_sent()
    }
}

/// In-process channel endpoint.
#[derive(Debug)]
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    sent: u64,
}

/// Two connected endpoints.
pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    (MemoryTransport { tx: atx, rx: arx, sent: 0 }, MemoryTransport { tx: btx, rx: brx, sent: 0 })
}

impl Transport for MemoryTransport {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx.send(frame.to_vec()).map_err(|_| Error::Transport("peer disconnected".into()))?;
        self.sent += frame.len() as u64;
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        match timeout {
            None => self.rx.recv().map(Some).map_err(|_| Error::Transport("peer disconnected".into())),
            Some(t) => match self.rx.recv_timeout(t) {
                Ok(f) => Ok(Some(f)),
                Err(RecvTimeoutError::Timeout) => Ok(None),
                Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("peer disconnected".into())),
            },
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }
}

/// Framed TCP stream.
#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
    reader: FrameReader,
    sent: u64,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect: {e}")))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self { stream, reader: FrameReader::new(), sent: 0 })
    }

    pub fn peer_addr(&self) -> Result<SocketAddr> {
        Ok(self.stream.peer_addr()?)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.stream.write_all(frame).map_err(|e| Error::Transport(format!("send: {e}")))?;
        self.sent += frame.len() as u64;
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut chunk = [0u8; 64 * 1024];
        loop {
            if let Some(frame) = self.reader.next_frame()? {
                return Ok(Some(frame));
            }
            let remaining = match deadline {
                Some(d) => match d.checked_duration_since(Instant::now()) {
                    Some(r) if !r.is_zero() => Some(r),
                    _ => return Ok(None),
                },
                None => None,
            };
            self.stream.set_read_timeout(remaining)?;
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(Error::Transport("connection closed by peer".into())),
                Ok(n) => self.reader.push(&chunk[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::Transport(format!("recv: {e}"))),
            }
        }
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }
}

/// Coordinator-side listener handing out one [`TcpTransport`] per accepted site.
#[derive(Debug)]
pub struct TcpHub {
    listener: TcpListener,
}

impl TcpHub {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind: {e}")))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self) -> Result<TcpTransport> {
        let (stream, _) = self.listener.accept().map_err(|e| Error::Transport(format!("accept: {e}")))?;
        TcpTransport::from_stream(stream)
    }
}

/// Shared view of a [`CountingTransport`]'s counters, readable from any thread.
#[derive(Debug, Clone, Default)]
pub struct ByteCounter {
    bytes: Arc<AtomicU64>,
    frames: Arc<AtomicU64>,
}

impl ByteCounter {
    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::SeqCst)
    }

    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::SeqCst)
    }
}

/// Wraps a transport and counts every byte and frame that leaves it.
#[derive(Debug)]
pub struct CountingTransport<T> {
    inner: T,
    counter: ByteCounter,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> (Self, ByteCounter) {
        let counter = ByteCounter::default();
        (Self { inner, counter: counter.clone() }, counter)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.inner.send(frame)?;
        self.counter.bytes.fetch_add(frame.len() as u64, Ordering::SeqCst);
        self.counter.frames.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Vec<u8>>> {
        self.inner.recv(timeout)
    }

    fn bytes_sent(&self) -> u64 {
        self.inner.bytes_sent()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::protocol::{decode, encode, Message};

    #[test]
    fn memory_pair_is_ordered_and_counts() {
        let (a, mut b) = memory_pair();
        let (mut a, counter) = CountingTransport::new(a);
        a.send(b"one").unwrap();
        a.send(b"three").unwrap();
        assert_eq!(b.recv(None).unwrap().unwrap(), b"one");
        assert_eq!(b.recv(Some(Duration::from_millis(10))).unwrap().unwrap(), b"three");
        assert_eq!(b.recv(Some(Duration::from_millis(10))).unwrap(), None);
        assert_eq!((counter.bytes(), counter.frames(), a.bytes_sent()), (8, 2, 8));
        drop(a);
        assert!(b.recv(None).is_err());
        assert!(b.send(b"x").is_err());
        assert_eq!(b.bytes_sent(), 0);
    }

    #[test]
    fn tcp_loopback() {
        let hub = TcpHub::bind("127.0.0.1:0").unwrap();
        let addr = hub.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut t = TcpTransport::connect(addr).unwrap();
            let msg = Message::Stop { study_id: "s".into(), reason: "done".into() };
            t.send(&encode(&msg)).unwrap();
            let echo = t.recv(Some(Duration::from_secs(10))).unwrap().unwrap();
            assert_eq!(decode(&echo).unwrap(), msg);
        });
        let mut server = hub.accept().unwrap();
        let frame = server.recv(Some(Duration::from_secs(10))).unwrap().unwrap();
        server.send(&frame).unwrap();
        client.join().unwrap();
        assert_eq!(server.bytes_sent(), frame.len() as u64);
    }
}
