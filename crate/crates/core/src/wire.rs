//! Control-channel message envelope and its length-prefixed framing.
//!
//! Every frame is a 4-byte big-endian payload length followed by that many
//! bytes of canonical JSON: object keys sorted, no insignificant whitespace,
//! absent fields omitted. The same codec carries registry, control and data
//! channel traffic.

use std::fmt;
use std::io::{self, Read};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Largest payload a frame may carry.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// Bytes in the length prefix.
pub const HEADER_LEN: usize = 4;

/// Longest permitted request identifier.
pub const MAX_ID_LEN: usize = 64;

/// Named parameters of a request. Keys are kept sorted.
pub type Params = serde_json::Map<String, Value>;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("frame payload of {0} bytes exceeds the 16 MiB cap")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("stream ended mid-frame")]
    Truncated,
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    NotFound,
    InvalidParams,
    PolicyDenied,
    InstrumentBusy,
    OutOfRange,
    Internal,
    Unauthenticated,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 7] = [
        ErrorCode::NotFound,
        ErrorCode::InvalidParams,
        ErrorCode::PolicyDenied,
        ErrorCode::InstrumentBusy,
        ErrorCode::OutOfRange,
        ErrorCode::Internal,
        ErrorCode::Unauthenticated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotFound => "NotFound",
            ErrorCode::InvalidParams => "InvalidParams",
            ErrorCode::PolicyDenied => "PolicyDenied",
            ErrorCode::InstrumentBusy => "InstrumentBusy",
            ErrorCode::OutOfRange => "OutOfRange",
            ErrorCode::Internal => "Internal",
            ErrorCode::Unauthenticated => "Unauthenticated",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured error carried in a failed response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ErrorInfo {
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorInfo {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.is_empty() {
            message = code.as_str().to_owned();
        }
        ErrorInfo { code, message }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn invalid_params(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidParams, message)
    }

    pub fn policy_denied(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::PolicyDenied, message)
    }

    pub fn busy(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InstrumentBusy, message)
    }

    pub fn out_of_range(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::OutOfRange, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: String,
    pub object: String,
    pub method: String,
    pub params: Params,
    pub principal: String,
}

impl Request {
    /// Builds a request with a fresh random identifier.
    pub fn new(
        object: impl Into<String>,
        method: impl Into<String>,
        params: Params,
        principal: impl Into<String>,
    ) -> Self {
        Request {
            id: uuid::Uuid::new_v4().simple().to_string(),
            object: object.into(),
            method: method.into(),
            params,
            principal: principal.into(),
        }
    }

    pub fn respond(&self, outcome: Result<Value, ErrorInfo>) -> Response {
        Response {
            id: self.id.clone(),
            principal: self.principal.clone(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: String,
    pub principal: String,
    pub outcome: Result<Value, ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Request(Request),
    Response(Response),
}

impl Message {
    pub fn id(&self) -> &str {
        match self {
            Message::Request(r) => &r.id,
            Message::Response(r) => &r.id,
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        let invalid = |m: &str| Err(WireError::InvalidMessage(m.to_owned()));
        let id = self.id();
        if id.is_empty() || id.chars().count() > MAX_ID_LEN {
            return invalid("id must be 1..=64 characters");
        }
        match self {
            Message::Request(req) => {
                if req.object.is_empty() || req.method.is_empty() {
                    return invalid("request needs a non-empty object and method");
                }
                for (key, value) in &req.params {
                    if !is_param_value(value) {
                        return Err(WireError::InvalidMessage(format!(
                            "parameter {key:?} is not a permitted value"
                        )));
                    }
                }
                Ok(())
            }
            Message::Response(resp) => match &resp.outcome {
                Ok(_) => Ok(()),
                Err(e) if e.message.is_empty() => invalid("error message must be non-empty"),
                Err(_) => Ok(()),
            },
        }
    }
}

impl From<Request> for Message {
    fn from(r: Request) -> Self {
        Message::Request(r)
    }
}

impl From<Response> for Message {
    fn from(r: Response) -> Self {
        Message::Response(r)
    }
}

/// Checks the value domain allowed in request parameters: scalars, 64-bit
/// signed integers, finite doubles, strings, homogeneous lists and
/// string-keyed maps.
pub fn is_param_value(value: &Value) -> bool {
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => true,
        Value::Number(n) => n.is_i64() || n.is_f64(),
        Value::Array(items) => {
            let Some(first) = items.first() else {
                return true;
            };
            let class = value_class(first);
            items
                .iter()
                .all(|v| value_class(v) == class && is_param_value(v))
        }
        Value::Object(map) => map.values().all(is_param_value),
    }
}

fn value_class(v: &Value) -> u8 {
    match v {
        Value::Null => 0,
        Value::Bool(_) => 1,
        Value::Number(_) => 2,
        Value::String(_) => 3,
        Value::Array(_) => 4,
        Value::Object(_) => 5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Kind {
    Request,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Status {
    Ok,
    Error,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    id: String,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Params>,
    #[serde(default)]
    principal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status: Option<Status>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<ErrorInfo>,
}

impl From<&Message> for WireMessage {
    fn from(msg: &Message) -> Self {
        match msg {
            Message::Request(r) => WireMessage {
                id: r.id.clone(),
                kind: Kind::Request,
                object: Some(r.object.clone()),
                method: Some(r.method.clone()),
                params: Some(r.params.clone()),
                principal: r.principal.clone(),
                status: None,
                result: None,
                error: None,
            },
            Message::Response(r) => {
                let (status, result, error) = match &r.outcome {
                    Ok(v) => (Status::Ok, Some(v.clone()), None),
                    Err(e) => (Status::Error, None, Some(e.clone())),
                };
                WireMessage {
                    id: r.id.clone(),
                    kind: Kind::Response,
                    object: None,
                    method: None,
                    params: None,
                    principal: r.principal.clone(),
                    status: Some(status),
                    result,
                    error,
                }
            }
        }
    }
}

impl TryFrom<WireMessage> for Message {
    type Error = WireError;

    fn try_from(w: WireMessage) -> Result<Self, WireError> {
        let malformed = |m: &str| WireError::MalformedFrame(m.to_owned());
        let msg = match w.kind {
            Kind::Request => {
                if w.status.is_some() || w.result.is_some() || w.error.is_some() {
                    return Err(malformed("request carries response fields"));
                }
                Message::Request(Request {
                    id: w.id,
                    object: w
                        .object
                        .ok_or_else(|| malformed("request without object"))?,
                    method: w
                        .method
                        .ok_or_else(|| malformed("request without method"))?,
                    params: w.params.unwrap_or_default(),
                    principal: w.principal,
                })
            }
            Kind::Response => {
                if w.object.is_some() || w.method.is_some() || w.params.is_some() {
                    return Err(malformed("response carries request fields"));
                }
                let outcome = match (w.status, w.result, w.error) {
                    (Some(Status::Ok), result, None) => Ok(result.unwrap_or(Value::Null)),
                    (Some(Status::Error), None, Some(e)) => Err(e),
                    _ => return Err(malformed("response status does not match its body")),
                };
                Message::Response(Response {
                    id: w.id,
                    principal: w.principal,
                    outcome,
                })
            }
        };
        msg.validate().map_err(|e| match e {
            WireError::InvalidMessage(m) => WireError::MalformedFrame(m),
            other => other,
        })?;
        Ok(msg)
    }
}

/// Serializes a message to its canonical JSON payload (no length prefix).
pub fn to_canonical_json(msg: &Message) -> Result<Vec<u8>, WireError> {
    msg.validate()?;
    // serde_json::Value keeps object keys in a BTreeMap, which yields sorted output.
    let value = serde_json::to_value(WireMessage::from(msg))
        .map_err(|e| WireError::InvalidMessage(e.to_string()))?;
    serde_json::to_vec(&value).map_err(|e| WireError::InvalidMessage(e.to_string()))
}

/// Parses one payload (without the length prefix).
pub fn from_json_payload(payload: &[u8]) -> Result<Message, WireError> {
    let text = std::str::from_utf8(payload)
        .map_err(|e| WireError::MalformedFrame(format!("payload is not UTF-8: {e}")))?;
    let wire: WireMessage = serde_json::from_str(text)
        .map_err(|e| WireError::MalformedFrame(format!("unparseable payload: {e}")))?;
    Message::try_from(wire)
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = to_canonical_json(msg)?;
    if payload.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(payload.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

fn check_declared_len(len: u32) -> Result<usize, WireError> {
    let len = len as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::MalformedFrame(format!(
            "declared length {len} exceeds the 16 MiB cap"
        )));
    }
    Ok(len)
}

/// Incremental decoder for byte streams that may split frames anywhere.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet consumed by a complete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete message, or `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let declared = u32::from_be_bytes(self.buf[..HEADER_LEN].try_into().unwrap());
        let len = check_declared_len(declared)?;
        if self.buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let msg = from_json_payload(&self.buf[HEADER_LEN..HEADER_LEN + len]);
        self.buf.drain(..HEADER_LEN + len);
        msg.map(Some)
    }

    /// Call at end of stream; errors if a partial frame is pending.
    pub fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Truncated)
        }
    }
}

/// Reads exactly one frame from a blocking reader, consuming no bytes past it.
pub fn decode_frame<R: Read>(reader: &mut R) -> Result<Message, WireError> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_truncated(reader, &mut header)?;
    let len = check_declared_len(u32::from_be_bytes(header))?;
    let mut payload = vec![0u8; len];
    read_exact_or_truncated(reader, &mut payload)?;
    from_json_payload(&payload)
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })
}

/// Reads one frame from an async stream. A clean end of stream at a frame
/// boundary yields `Ok(None)`.
pub async fn read_message<R: AsyncRead + Unpin>(
    reader: &mut R,
) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = reader.read(&mut header[filled..]).await?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(WireError::Truncated)
            };
        }
        filled += n;
    }
    let len = check_declared_len(u32::from_be_bytes(header))?;
    let mut payload = vec![0u8; len];
    reader
        .read_exact(&mut payload)
        .await
        .map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => WireError::Truncated,
            _ => WireError::Io(e),
        })?;
    from_json_payload(&payload).map(Some)
}

pub async fn write_message<W: AsyncWrite + Unpin>(
    writer: &mut W,
    msg: &Message,
) -> Result<(), WireError> {
    let frame = encode_frame(msg)?;
    writer.write_all(&frame).await?;
    writer.flush().await?;
    Ok(())
}
