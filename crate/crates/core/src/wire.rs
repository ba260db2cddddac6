//! Length-prefixed JSON framing shared by the registry and invocation protocols.
//!
//! A frame is a 4-byte big-endian payload length followed by exactly that
//! many bytes of UTF-8 JSON. The JSON document is an [`Envelope`].

use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Hard cap on a single frame payload (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// Closed set of message tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Register,
    RegisterOk,
    Lookup,
    LookupOk,
    NotFound,
    Unregister,
    List,
    ListOk,
    Stats,
    Invoke,
    InvokeOk,
    InvokeErr,
    Err,
}

impl MsgType {
    pub const ALL: [MsgType; 13] = [
        MsgType::Register,
        MsgType::RegisterOk,
        MsgType::Lookup,
        MsgType::LookupOk,
        MsgType::NotFound,
        MsgType::Unregister,
        MsgType::List,
        MsgType::ListOk,
        MsgType::Stats,
        MsgType::Invoke,
        MsgType::InvokeOk,
        MsgType::InvokeErr,
        MsgType::Err,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "REGISTER",
            MsgType::RegisterOk => "REGISTER_OK",
            MsgType::Lookup => "LOOKUP",
            MsgType::LookupOk => "LOOKUP_OK",
            MsgType::NotFound => "NOT_FOUND",
            MsgType::Unregister => "UNREGISTER",
            MsgType::List => "LIST",
            MsgType::ListOk => "LIST_OK",
            MsgType::Stats => "STATS",
            MsgType::Invoke => "INVOKE",
            MsgType::InvokeOk => "INVOKE_OK",
            MsgType::InvokeErr => "INVOKE_ERR",
            MsgType::Err => "ERR",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, WireError> {
        MsgType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| WireError::MalformedPayload(format!("unknown msg_type {s:?}")))
    }
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub request_id: u64,
    #[serde(default = "empty_body")]
    pub body: Value,
}

fn empty_body() -> Value {
    Value::Object(Default::default())
}

impl Envelope {
    pub fn new(msg_type: MsgType, request_id: u64, body: Value) -> Self {
        Envelope {
            msg_type,
            request_id,
            body,
        }
    }

    /// Builds a response that carries this envelope's request id.
    pub fn reply(&self, msg_type: MsgType, body: Value) -> Envelope {
        Envelope::new(msg_type, self.request_id, body)
    }

    /// Deserializes the body into a typed message.
    pub fn parse_body<T: for<'de> Deserialize<'de>>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| WireError::MalformedPayload(format!("{} body: {e}", self.msg_type)))
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte cap")]
    OversizedFrame(usize),
    #[error("stream ended mid-frame ({read} of {expected} bytes)")]
    TruncatedFrame { read: usize, expected: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("connection closed")]
    Eof,
    #[error("connection is unusable after an earlier protocol error")]
    Poisoned,
    #[error("response request_id {got} does not match request {expected}")]
    Correlation { expected: u64, got: u64 },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl WireError {
    /// True for failures of the transport itself (as opposed to protocol content).
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            WireError::Io(_) | WireError::Eof | WireError::TruncatedFrame { .. } | WireError::Poisoned
        )
    }
}

pub fn encode_frame(envelope: &Envelope) -> Result<Vec<u8>, WireError> {
    let payload = serde_json::to_vec(envelope)
        .map_err(|e| WireError::MalformedPayload(e.to_string()))?;
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::OversizedFrame(payload.len()));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads exactly one frame from `reader` and parses it.
///
/// A stream that ends before the first prefix byte yields [`WireError::Eof`];
/// one that ends anywhere later yields [`WireError::TruncatedFrame`]. The
/// length is validated before the payload buffer is allocated.
pub fn decode_frame<R: Read>(reader: &mut R) -> Result<Envelope, WireError> {
    let mut prefix = [0u8; 4];
    let got = read_full(reader, &mut prefix)?;
    if got == 0 {
        return Err(WireError::Eof);
    }
    if got < 4 {
        return Err(WireError::TruncatedFrame {
            read: got,
            expected: 4,
        });
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::OversizedFrame(len));
    }
    let mut payload = vec![0u8; len];
    let got = read_full(reader, &mut payload)?;
    if got < len {
        return Err(WireError::TruncatedFrame {
            read: 4 + got,
            expected: 4 + len,
        });
    }
    parse_payload(&payload)
}

fn parse_payload(payload: &[u8]) -> Result<Envelope, WireError> {
    let value: Value =
        serde_json::from_slice(payload).map_err(|e| WireError::MalformedPayload(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| WireError::MalformedPayload("payload is not a JSON object".into()))?;
    let tag = obj
        .get("msg_type")
        .and_then(Value::as_str)
        .ok_or_else(|| WireError::MalformedPayload("missing msg_type".into()))?;
    let msg_type = MsgType::from_str(tag)?;
    let request_id = obj
        .get("request_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| WireError::MalformedPayload("missing or invalid request_id".into()))?;
    let body = obj.get("body").cloned().unwrap_or_else(empty_body);
    Ok(Envelope {
        msg_type,
        request_id,
        body,
    })
}

/// Fills `buf` as far as the stream allows; returns the number of bytes read.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<usize, WireError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(WireError::Io(e)),
        }
    }
    Ok(filled)
}

pub fn write_frame<W: Write>(writer: &mut W, envelope: &Envelope) -> Result<(), WireError> {
    let bytes = encode_frame(envelope)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

/// Default client-side I/O timeout.
pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(5);

/// A single-owner framed TCP connection.
///
/// Any decode error poisons the connection; it never tries to resynchronize.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    poisoned: bool,
}

impl Connection {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Connection, WireError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Connection::from_stream(stream))
    }

    pub fn from_stream(stream: TcpStream) -> Connection {
        Connection {
            stream,
            poisoned: false,
        }
    }

    pub fn send(&mut self, envelope: &Envelope) -> Result<(), WireError> {
        if self.poisoned {
            return Err(WireError::Poisoned);
        }
        write_frame(&mut self.stream, envelope).inspect_err(|_| self.poisoned = true)
    }

    pub fn recv(&mut self) -> Result<Envelope, WireError> {
        if self.poisoned {
            return Err(WireError::Poisoned);
        }
        decode_frame(&mut self.stream).inspect_err(|_| self.poisoned = true)
    }

    /// Sends `envelope` and waits for the correlated response.
    pub fn request(&mut self, envelope: &Envelope) -> Result<Envelope, WireError> {
        self.send(envelope)?;
        let resp = self.recv()?;
        if resp.request_id != envelope.request_id {
            self.poisoned = true;
            return Err(WireError::Correlation {
                expected: envelope.request_id,
                got: resp.request_id,
            });
        }
        Ok(resp)
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }
}

/// Resolves a `host:port` string to the first socket address it names.
pub fn resolve_addr(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?.next().ok_or_else(|| {
        io::Error::new(io::ErrorKind::AddrNotAvailable, format!("no address for {addr}"))
    })
}
