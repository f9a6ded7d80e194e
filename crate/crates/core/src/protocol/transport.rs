use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::{self, JoinHandle};

use super::wire::{decode, encode, read_frame, write_frame, Message};
use crate::error::{Error, Result};

/// A bidirectional, ordered message pipe. Every message crosses as an
/// encoded frame whatever the transport.
pub trait Link: Send {
    /// Returns the frame size in bytes.
    fn send(&mut self, msg: &Message) -> Result<usize>;
    fn recv(&mut self) -> Result<Message>;
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn send(&mut self, msg: &Message) -> Result<usize> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<Message> {
        (**self).recv()
    }
}

pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (atx, brx) = channel();
    let (btx, arx) = channel();
    (ChannelLink { tx: atx, rx: arx }, ChannelLink { tx: btx, rx: brx })
}

impl Link for ChannelLink {
    fn send(&mut self, msg: &Message) -> Result<usize> {
        let bytes = encode(msg);
        let n = bytes.len();
        self.tx
            .send(bytes)
            .map_err(|_| Error::Protocol("peer hung up".into()))?;
        Ok(n)
    }

    fn recv(&mut self) -> Result<Message> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| Error::Protocol("peer hung up".into()))?;
        decode(&bytes)
    }
}

/// Frames over a TCP stream. Writes go through a queue drained by a
/// background thread, so a sender never blocks on a peer that is itself
/// busy sending.
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: Option<Sender<Message>>,
    flusher: Option<JoinHandle<Result<()>>>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let (tx, rx) = channel::<Message>();
        let flusher = thread::spawn(move || {
            let mut w = BufWriter::new(stream);
            while let Ok(m) = rx.recv() {
                write_frame(&mut w, &m)?;
            }
            Ok(())
        });
        Ok(Self {
            reader,
            writer: Some(tx),
            flusher: Some(flusher),
        })
    }
}

impl Drop for TcpLink {
    fn drop(&mut self) {
        self.writer.take();
        if let Some(h) = self.flusher.take() {
            let _ = h.join();
        }
    }
}

/// Two ends of a loopback TCP connection on an ephemeral port.
pub fn tcp_pair() -> Result<(TcpLink, TcpLink)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let client = TcpStream::connect(listener.local_addr()?)?;
    let (server, _) = listener.accept()?;
    Ok((TcpLink::new(server)?, TcpLink::new(client)?))
}

impl Link for TcpLink {
    fn send(&mut self, msg: &Message) -> Result<usize> {
        let n = msg.frame_len();
        self.writer
            .as_ref()
            .expect("open until drop")
            .send(msg.clone())
            .map_err(|_| Error::Protocol("tcp writer stopped".into()))?;
        Ok(n)
    }

    fn recv(&mut self) -> Result<Message> {
        read_frame(&mut self.reader)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Channel,
    Tcp,
}

pub fn link_pair(kind: TransportKind) -> Result<(Box<dyn Link>, Box<dyn Link>)> {
    Ok(match kind {
        TransportKind::Channel => {
            let (a, b) = channel_pair();
            (Box::new(a), Box::new(b))
        }
        TransportKind::Tcp => {
            let (a, b) = tcp_pair()?;
            (Box::new(a), Box::new(b))
        }
    })
}
