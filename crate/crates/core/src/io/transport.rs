//! Message transports. The coordinator and clients only see [`Transport`],
//! so the same code runs over in-process channels and TCP.

use std::io::{ErrorKind, Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use super::message::{decode_payload, encode_message, Message, MessageKind, MAX_PAYLOAD};
use super::ProtocolError;

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<(), ProtocolError>;
    fn recv(&mut self) -> Result<Message, ProtocolError>;
}

/// One end of an in-process link. Frames are encoded and decoded exactly as
/// on a socket.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (ChannelTransport { tx: a_tx, rx: a_rx }, ChannelTransport { tx: b_tx, rx: b_rx })
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.tx.send(encode_message(msg)).map_err(|_| ProtocolError::Closed)
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let frame = self.rx.recv().map_err(|_| ProtocolError::Closed)?;
        super::message::decode_message(&frame)
    }
}

/// Length-prefixed frames over any byte stream.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

fn io_err(e: std::io::Error) -> ProtocolError {
    match e.kind() {
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::BrokenPipe => ProtocolError::Closed,
        _ => ProtocolError::Io(e.to_string()),
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        self.stream.write_all(&encode_message(msg)).map_err(io_err)?;
        self.stream.flush().map_err(io_err)
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let mut header = [0u8; 5];
        self.stream.read_exact(&mut header).map_err(io_err)?;
        let len = u32::from_le_bytes(header[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(ProtocolError::TooLarge(len));
        }
        let kind = MessageKind::from_byte(header[4])?;
        let mut payload = vec![0u8; len];
        self.stream.read_exact(&mut payload).map_err(io_err)?;
        decode_payload(kind, &payload)
    }
}
