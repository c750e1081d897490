//! Framed duplex channel between the two parties.
//!
//! Wire format, little-endian throughout:
//!
//! ```text
//! frame = length: u32 | tag: u8 | payload: [u8; length]
//! ```
//!
//! Every channel keeps exact byte, message and round counters. A round is
//! one simultaneous exchange, or one one-directional message the peer has to
//! wait for. Session control frames (HELLO, OUTPUT_SHARE, BYE) move bytes but
//! are not protocol rounds.

use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{elements_to_le_bytes, FieldElement, FieldParams, ELEMENT_BYTES};

pub const HEADER_BYTES: usize = 5;
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;
pub const PROTOCOL_VERSION: u16 = 1;
pub const HELLO_BYTES: usize = 2 + 1 + 16 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    Hello = 0x01,
    LinearMaskedInput = 0x02,
    ActReveal = 0x03,
    OutputShare = 0x04,
    Bye = 0x05,
}

impl TryFrom<u8> for Tag {
    type Error = TransportError;

    fn try_from(b: u8) -> Result<Self, Self::Error> {
        Ok(match b {
            0x01 => Tag::Hello,
            0x02 => Tag::LinearMaskedInput,
            0x03 => Tag::ActReveal,
            0x04 => Tag::OutputShare,
            0x05 => Tag::Bye,
            other => return Err(TransportError::MalformedFrame(format!("unknown tag 0x{other:02x}"))),
        })
    }
}

impl Tag {
    fn check_payload_len(self, len: usize) -> Result<(), TransportError> {
        let ok = match self {
            Tag::Hello => len == HELLO_BYTES,
            Tag::Bye => len == 0,
            Tag::LinearMaskedInput | Tag::ActReveal | Tag::OutputShare => len.is_multiple_of(ELEMENT_BYTES),
        };
        if ok {
            Ok(())
        } else {
            Err(TransportError::MalformedFrame(format!("{self:?} frame with {len}-byte payload")))
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed by peer")]
    ChannelClosed,
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("expected {expected:?} frame, peer sent {got:?}")]
    TagMismatch { expected: Tag, got: Tag },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(tag: Tag, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(tag as u8);
        out.extend_from_slice(payload);
        out
    }
}

/// Session handshake payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub version: u16,
    /// Bit 0: exact (test-only) truncation.
    pub flags: u8,
    pub session_id: [u8; 16],
    pub model_hash: [u8; 32],
}

impl Hello {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HELLO_BYTES);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.flags);
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&self.model_hash);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TransportError> {
        if b.len() != HELLO_BYTES {
            return Err(TransportError::MalformedFrame(format!("HELLO payload of {} bytes", b.len())));
        }
        let mut session_id = [0u8; 16];
        session_id.copy_from_slice(&b[3..19]);
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&b[19..]);
        Ok(Hello { flags: b[2], model_hash, version: u16::from_le_bytes([b[0], b[1]]), session_id })
    }
}

/// Point-in-time copy of a channel's counters, from this party's view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
    pub frame_bytes_sent: u64,
    pub frame_bytes_received: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
    pub rounds: u64,
}

impl ChannelMetrics {
    /// Payload in both directions.
    pub fn payload_total(&self) -> u64 {
        self.payload_bytes_sent + self.payload_bytes_received
    }

    pub fn frame_total(&self) -> u64 {
        self.frame_bytes_sent + self.frame_bytes_received
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &ChannelMetrics) -> ChannelMetrics {
        ChannelMetrics {
            payload_bytes_sent: self.payload_bytes_sent - earlier.payload_bytes_sent,
            payload_bytes_received: self.payload_bytes_received - earlier.payload_bytes_received,
            frame_bytes_sent: self.frame_bytes_sent - earlier.frame_bytes_sent,
            frame_bytes_received: self.frame_bytes_received - earlier.frame_bytes_received,
            messages_sent: self.messages_sent - earlier.messages_sent,
            messages_received: self.messages_received - earlier.messages_received,
            rounds: self.rounds - earlier.rounds,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    payload_sent: AtomicU64,
    payload_received: AtomicU64,
    frame_sent: AtomicU64,
    frame_received: AtomicU64,
    messages_sent: AtomicU64,
    messages_received: AtomicU64,
    rounds: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> ChannelMetrics {
        ChannelMetrics {
            payload_bytes_sent: self.payload_sent.load(Ordering::Acquire),
            payload_bytes_received: self.payload_received.load(Ordering::Acquire),
            frame_bytes_sent: self.frame_sent.load(Ordering::Acquire),
            frame_bytes_received: self.frame_received.load(Ordering::Acquire),
            messages_sent: self.messages_sent.load(Ordering::Acquire),
            messages_received: self.messages_received.load(Ordering::Acquire),
            rounds: self.rounds.load(Ordering::Acquire),
        }
    }

    fn reset(&self) {
        for c in [
            &self.payload_sent,
            &self.payload_received,
            &self.frame_sent,
            &self.frame_received,
            &self.messages_sent,
            &self.messages_received,
            &self.rounds,
        ] {
            c.store(0, Ordering::Release);
        }
    }
}

/// Read-only view of a channel's counters, usable from another thread.
#[derive(Debug, Clone)]
pub struct MetricsHandle(Arc<Counters>);

impl MetricsHandle {
    pub fn snapshot(&self) -> ChannelMetrics {
        self.0.snapshot()
    }
}

/// Byte-stream backend under a [`Channel`].
pub trait Link: Send {
    /// Queues one encoded frame for delivery.
    fn send(&mut self, bytes: Vec<u8>) -> io::Result<()>;
    /// Fills `buf` completely or fails with `UnexpectedEof`.
    fn recv_exact(&mut self, buf: &mut [u8]) -> io::Result<()>;
}

/// In-process backend over a pair of mpsc queues.
pub struct LoopbackLink {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
}

impl Link for LoopbackLink {
    fn send(&mut self, bytes: Vec<u8>) -> io::Result<()> {
        self.tx.send(bytes).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "loopback peer dropped"))
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            if self.pos == self.pending.len() {
                match self.rx.recv() {
                    Ok(chunk) => {
                        self.pending = chunk;
                        self.pos = 0;
                    }
                    Err(_) => return Err(io::ErrorKind::UnexpectedEof.into()),
                }
                continue;
            }
            let n = (buf.len() - filled).min(self.pending.len() - self.pos);
            buf[filled..filled + n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
            filled += n;
            self.pos += n;
        }
        Ok(())
    }
}

/// TCP backend. Writes go through a dedicated thread so that two parties
/// sending large payloads at once cannot deadlock on full socket buffers.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: Option<mpsc::Sender<Vec<u8>>>,
    writer_thread: Option<JoinHandle<()>>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let mut write_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let writer_thread = std::thread::Builder::new().name("tabula-tcp-writer".into()).spawn(move || {
            for chunk in rx {
                if write_half.write_all(&chunk).is_err() {
                    break;
                }
            }
            let _ = write_half.flush();
            let _ = write_half.shutdown(Shutdown::Write);
        })?;
        Ok(TcpLink {
            reader: BufReader::with_capacity(1 << 16, stream),
            writer: Some(tx),
            writer_thread: Some(writer_thread),
        })
    }
}

impl Link for TcpLink {
    fn send(&mut self, bytes: Vec<u8>) -> io::Result<()> {
        match &self.writer {
            Some(tx) => tx.send(bytes).map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "tcp writer stopped")),
            None => Err(io::ErrorKind::BrokenPipe.into()),
        }
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        self.reader.read_exact(buf)
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        // Closing the queue lets the writer drain, flush and half-close.
        self.writer.take();
        if let Some(t) = self.writer_thread.take() {
            let _ = t.join();
        }
    }
}

/// A framed, metered duplex channel serving one protocol session.
pub struct Channel {
    link: Box<dyn Link>,
    counters: Arc<Counters>,
    transcript: Option<Vec<Frame>>,
}

impl Channel {
    pub fn new(link: Box<dyn Link>) -> Self {
        Channel { link, counters: Arc::new(Counters::default()), transcript: None }
    }

    /// Two connected in-process endpoints.
    pub fn loopback_pair() -> (Channel, Channel) {
        let (tx_a, rx_b) = mpsc::channel();
        let (tx_b, rx_a) = mpsc::channel();
        let a = LoopbackLink { tx: tx_a, rx: rx_a, pending: Vec::new(), pos: 0 };
        let b = LoopbackLink { tx: tx_b, rx: rx_b, pending: Vec::new(), pos: 0 };
        (Channel::new(Box::new(a)), Channel::new(Box::new(b)))
    }

    pub fn tcp(stream: TcpStream) -> io::Result<Channel> {
        Ok(Channel::new(Box::new(TcpLink::new(stream)?)))
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Channel> {
        Channel::tcp(TcpStream::connect(addr)?)
    }

    pub fn send_frame(&mut self, tag: Tag, payload: &[u8]) -> Result<(), TransportError> {
        if payload.len() > MAX_PAYLOAD_BYTES {
            return Err(TransportError::MalformedFrame(format!("payload of {} bytes", payload.len())));
        }
        let len = payload.len() as u64;
        self.link.send(Frame::encode(tag, payload)).map_err(map_io)?;
        self.counters.payload_sent.fetch_add(len, Ordering::AcqRel);
        self.counters.frame_sent.fetch_add(len + HEADER_BYTES as u64, Ordering::AcqRel);
        self.counters.messages_sent.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn recv_frame(&mut self) -> Result<Frame, TransportError> {
        let mut header = [0u8; HEADER_BYTES];
        self.link.recv_exact(&mut header).map_err(map_io)?;
        let len = u32::from_le_bytes([header[0], header[1], header[2], header[3]]) as usize;
        let tag = Tag::try_from(header[4])?;
        if len > MAX_PAYLOAD_BYTES {
            return Err(TransportError::MalformedFrame(format!("declared length {len} exceeds limit")));
        }
        tag.check_payload_len(len)?;
        let mut payload = vec![0u8; len];
        self.link.recv_exact(&mut payload).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => {
                TransportError::MalformedFrame(format!("stream ended inside a {len}-byte payload"))
            }
            _ => map_io(e),
        })?;
        self.counters.payload_received.fetch_add(len as u64, Ordering::AcqRel);
        self.counters.frame_received.fetch_add((len + HEADER_BYTES) as u64, Ordering::AcqRel);
        self.counters.messages_received.fetch_add(1, Ordering::AcqRel);
        let frame = Frame { tag, payload };
        if let Some(t) = self.transcript.as_mut() {
            t.push(frame.clone());
        }
        Ok(frame)
    }

    /// Receives one frame and insists on its tag. Does not count a round.
    pub fn recv_expect(&mut self, tag: Tag) -> Result<Vec<u8>, TransportError> {
        let frame = self.recv_frame()?;
        if frame.tag != tag {
            return Err(TransportError::TagMismatch { expected: tag, got: frame.tag });
        }
        Ok(frame.payload)
    }

    /// Simultaneous send and receive under one tag: one round.
    pub fn exchange(&mut self, tag: Tag, mine: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.send_frame(tag, mine)?;
        let theirs = self.recv_expect(tag)?;
        self.counters.rounds.fetch_add(1, Ordering::AcqRel);
        Ok(theirs)
    }

    /// One-directional message the peer waits on: one round on the sender.
    pub fn send_step(&mut self, tag: Tag, payload: &[u8]) -> Result<(), TransportError> {
        self.send_frame(tag, payload)?;
        self.counters.rounds.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Counterpart of [`Channel::send_step`]: one round on the receiver.
    pub fn recv_step(&mut self, tag: Tag) -> Result<Vec<u8>, TransportError> {
        let payload = self.recv_expect(tag)?;
        self.counters.rounds.fetch_add(1, Ordering::AcqRel);
        Ok(payload)
    }

    pub fn exchange_elements(
        &mut self,
        tag: Tag,
        mine: &[FieldElement],
        field: &FieldParams,
    ) -> Result<Vec<FieldElement>, TransportError> {
        let theirs = self.exchange(tag, &elements_to_le_bytes(mine))?;
        decode_elements(&theirs, field)
    }

    /// Handshake: both sides send HELLO and check the peer's version and
    /// session id against their own. Not a protocol round.
    pub fn handshake(&mut self, hello: Hello) -> Result<Hello, TransportError> {
        self.send_frame(Tag::Hello, &hello.to_bytes())?;
        let peer = Hello::from_bytes(&self.recv_expect(Tag::Hello)?)?;
        Ok(peer)
    }

    /// Starts keeping a copy of every inbound frame.
    pub fn record_inbound(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    /// Frames received since recording started; recording continues.
    pub fn take_transcript(&mut self) -> Vec<Frame> {
        self.transcript.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn metrics_snapshot(&self) -> ChannelMetrics {
        self.counters.snapshot()
    }

    pub fn reset_metrics(&self) {
        self.counters.reset();
    }

    pub fn metrics_handle(&self) -> MetricsHandle {
        MetricsHandle(Arc::clone(&self.counters))
    }
}

pub fn decode_elements(bytes: &[u8], field: &FieldParams) -> Result<Vec<FieldElement>, TransportError> {
    field.elements_from_le_bytes(bytes).map_err(|e| TransportError::MalformedFrame(e.to_string()))
}

fn map_io(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted => TransportError::ChannelClosed,
        _ => TransportError::Io(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    /// Raw byte injector for malformed-input tests.
    struct ScriptedLink {
        inbound: Vec<u8>,
        pos: usize,
    }

    impl Link for ScriptedLink {
        fn send(&mut self, _bytes: Vec<u8>) -> io::Result<()> {
            Ok(())
        }
        fn recv_exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
            if self.inbound.len() - self.pos < buf.len() {
                self.pos = self.inbound.len();
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
            buf.copy_from_slice(&self.inbound[self.pos..self.pos + buf.len()]);
            self.pos += buf.len();
            Ok(())
        }
    }

    fn scripted(bytes: Vec<u8>) -> Channel {
        Channel::new(Box::new(ScriptedLink { inbound: bytes, pos: 0 }))
    }

    #[test]
    fn frame_layout_is_bit_exact() {
        assert_eq!(Frame::encode(Tag::ActReveal, &[0xaa, 0xbb]), vec![2, 0, 0, 0, 0x03, 0xaa, 0xbb]);
        let hello = Hello { version: 1, flags: 0, session_id: [7; 16], model_hash: [9; 32] };
        let bytes = hello.to_bytes();
        assert_eq!(&bytes[..2], &[1, 0]);
        assert_eq!(Hello::from_bytes(&bytes).unwrap(), hello);
    }

    #[test]
    fn empty_frame_is_delivered() {
        let (mut a, mut b) = Channel::loopback_pair();
        a.send_frame(Tag::Bye, &[]).unwrap();
        let f = b.recv_frame().unwrap();
        assert_eq!(f, Frame { tag: Tag::Bye, payload: vec![] });
        assert_eq!(b.metrics_snapshot().frame_bytes_received, 5);
    }

    #[test]
    fn three_elements_count_24_payload_bytes() {
        let (mut a, mut b) = Channel::loopback_pair();
        let field = FieldParams::default();
        let elems = [field.element(1), field.element(2), field.element(3)];
        a.send_frame(Tag::OutputShare, &elements_to_le_bytes(&elems)).unwrap();
        let m = a.metrics_snapshot();
        assert_eq!(m.payload_bytes_sent, 24);
        assert_eq!(m.frame_bytes_sent, 29);
        assert_eq!(m.rounds, 0);
        let got = b.recv_expect(Tag::OutputShare).unwrap();
        assert_eq!(decode_elements(&got, &field).unwrap(), elems);
    }

    #[test]
    fn unknown_tag_is_malformed() {
        let mut ch = scripted(vec![0, 0, 0, 0, 0x09]);
        assert!(matches!(ch.recv_frame(), Err(TransportError::MalformedFrame(_))));
    }

    #[test]
    fn misaligned_and_truncated_payloads_are_malformed() {
        let mut ch = scripted(vec![3, 0, 0, 0, 0x03, 1, 2, 3]);
        assert!(matches!(ch.recv_frame(), Err(TransportError::MalformedFrame(_))));
        let mut ch = scripted(vec![16, 0, 0, 0, 0x03, 1, 2, 3]);
        assert!(matches!(ch.recv_frame(), Err(TransportError::MalformedFrame(_))));
        let mut ch = scripted(vec![4, 0, 0, 0, 0x05, 1, 2, 3, 4]);
        assert!(matches!(ch.recv_frame(), Err(TransportError::MalformedFrame(_))));
    }

    #[test]
    fn clean_eof_is_channel_closed() {
        let mut ch = scripted(vec![]);
        assert!(matches!(ch.recv_frame(), Err(TransportError::ChannelClosed)));
        let (a, mut b) = Channel::loopback_pair();
        drop(a);
        assert!(matches!(b.recv_frame(), Err(TransportError::ChannelClosed)));
        assert!(matches!(b.send_frame(Tag::Bye, &[]), Err(TransportError::ChannelClosed)));
    }

    #[test]
    fn exchange_counts_one_round_each_side() {
        let (mut a, mut b) = Channel::loopback_pair();
        let t = thread::spawn(move || {
            let got = b.exchange(Tag::ActReveal, &[2u8; 8]).unwrap();
            (got, b.metrics_snapshot())
        });
        let got_a = a.exchange(Tag::ActReveal, &[1u8; 8]).unwrap();
        let (got_b, mb) = t.join().unwrap();
        let ma = a.metrics_snapshot();
        assert_eq!(got_a, vec![2u8; 8]);
        assert_eq!(got_b, vec![1u8; 8]);
        for m in [ma, mb] {
            assert_eq!(m.payload_bytes_sent, 8);
            assert_eq!(m.payload_bytes_received, 8);
            assert_eq!(m.rounds, 1);
        }
        assert_eq!(ma.payload_bytes_sent + mb.payload_bytes_sent, 16);
    }

    #[test]
    fn empty_exchange_still_a_round() {
        let (mut a, mut b) = Channel::loopback_pair();
        let t = thread::spawn(move || b.exchange(Tag::ActReveal, &[]).map(|_| b.metrics_snapshot()));
        a.exchange(Tag::ActReveal, &[]).unwrap();
        let mb = t.join().unwrap().unwrap();
        assert_eq!(a.metrics_snapshot().rounds, 1);
        assert_eq!(mb.rounds, 1);
        assert_eq!(mb.payload_total(), 0);
    }

    #[test]
    fn exchange_tag_mismatch() {
        let (mut a, mut b) = Channel::loopback_pair();
        b.send_frame(Tag::OutputShare, &[]).unwrap();
        assert!(matches!(
            a.exchange(Tag::ActReveal, &[]),
            Err(TransportError::TagMismatch { expected: Tag::ActReveal, got: Tag::OutputShare })
        ));
    }

    #[test]
    fn metrics_snapshot_and_reset() {
        let (mut a, mut b) = Channel::loopback_pair();
        assert_eq!(a.metrics_snapshot(), ChannelMetrics::default());
        let handle = a.metrics_handle();
        a.send_step(Tag::LinearMaskedInput, &[0u8; 16]).unwrap();
        b.recv_step(Tag::LinearMaskedInput).unwrap();
        assert_eq!(a.metrics_snapshot(), a.metrics_snapshot());
        let seen = thread::spawn(move || handle.snapshot()).join().unwrap();
        assert_eq!(seen.payload_bytes_sent, 16);
        assert_eq!(seen.rounds, 1);
        assert_eq!(b.metrics_snapshot().rounds, 1);
        a.reset_metrics();
        assert_eq!(a.metrics_snapshot(), ChannelMetrics::default());
    }

    fn tcp_pair() -> (Channel, Channel) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = thread::spawn(move || Channel::tcp(listener.accept().unwrap().0).unwrap());
        let a = Channel::connect(addr).unwrap();
        (a, t.join().unwrap())
    }

    /// The same exchange sequence over both backends yields identical counters.
    #[test]
    fn loopback_and_tcp_metrics_agree() {
        fn script(mut a: Channel, mut b: Channel) -> (ChannelMetrics, ChannelMetrics) {
            let big = vec![5u8; 8 * 200_000];
            let big2 = big.clone();
            let t = thread::spawn(move || {
                b.recv_step(Tag::LinearMaskedInput).unwrap();
                b.exchange(Tag::ActReveal, &big2).unwrap();
                b.send_frame(Tag::Bye, &[]).unwrap();
                b.metrics_snapshot()
            });
            a.send_step(Tag::LinearMaskedInput, &[1u8; 64]).unwrap();
            assert_eq!(a.exchange(Tag::ActReveal, &big).unwrap().len(), big.len());
            a.recv_expect(Tag::Bye).unwrap();
            (a.metrics_snapshot(), t.join().unwrap())
        }
        let (la, lb) = Channel::loopback_pair();
        let (ta, tb) = tcp_pair();
        assert_eq!(script(la, lb), script(ta, tb));
    }

    #[test]
    fn tcp_peer_drop_is_channel_closed() {
        let (mut a, b) = tcp_pair();
        drop(b);
        assert!(matches!(a.recv_frame(), Err(TransportError::ChannelClosed)));
    }
}
