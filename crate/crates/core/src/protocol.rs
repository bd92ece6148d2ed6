//! Client/session-server wire protocol.
//!
//! Every frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object `{"payload":{..},"session":"..","type":"..","v":1}`. Keys are written
//! in lexicographic order at every nesting level, so equal messages encode to
//! identical bytes. Decoding is strict: unknown top-level or payload fields,
//! unknown message types and other versions are rejected.

use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::aggregation::DPConfig;
use crate::analytics::{FAQuery, Pseudonym, ReportPayload};
use crate::model::{ModelSpec, Platform};
use crate::trainer::Hyperparams;

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted frame body, in bytes.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionKind {
    FL,
    FA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinRequest {
    pub client_id: String,
    pub platform: Platform,
    pub app_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinAccept {
    pub round: u64,
    /// `null` for analytics sessions.
    #[serde(deserialize_with = "Option::deserialize")]
    pub model_spec: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub platform: Platform,
    pub app_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task_id: String,
    #[serde(deserialize_with = "Option::deserialize")]
    pub model_id: Option<String>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub model_version: Option<u64>,
    pub kind: SessionKind,
    pub port: u16,
    #[serde(deserialize_with = "Option::deserialize")]
    pub hyperparams: Option<Hyperparams>,
    pub dp: DPConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitIns {
    pub round: u64,
    pub params: Vec<f64>,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRes {
    pub round: u64,
    pub params: Vec<f64>,
    pub num_examples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateIns {
    pub round: u64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRes {
    pub round: u64,
    pub loss: f64,
    pub metric: f64,
    pub num_examples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FAQueryIns {
    pub query: FAQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FAReportRes {
    pub pseudonym: Pseudonym,
    pub payload: ReportPayload,
    #[serde(deserialize_with = "Option::deserialize")]
    pub cluster: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundEnd {
    pub round: u64,
    pub global_params: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorMsg {
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    JoinRequest(JoinRequest),
    JoinAccept(JoinAccept),
    TaskRequest(TaskRequest),
    TaskManifest(TaskManifest),
    FitIns(FitIns),
    FitRes(FitRes),
    EvaluateIns(EvaluateIns),
    EvaluateRes(EvaluateRes),
    FAQueryIns(FAQueryIns),
    FAReportRes(FAReportRes),
    RoundEnd(RoundEnd),
    ErrorMsg(ErrorMsg),
}

pub const MESSAGE_TYPES: [&str; 12] = [
    "JoinRequest",
    "JoinAccept",
    "TaskRequest",
    "TaskManifest",
    "FitIns",
    "FitRes",
    "EvaluateIns",
    "EvaluateRes",
    "FAQueryIns",
    "FAReportRes",
    "RoundEnd",
    "ErrorMsg",
];

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::JoinRequest(_) => "JoinRequest",
            Body::JoinAccept(_) => "JoinAccept",
            Body::TaskRequest(_) => "TaskRequest",
            Body::TaskManifest(_) => "TaskManifest",
            Body::FitIns(_) => "FitIns",
            Body::FitRes(_) => "FitRes",
            Body::EvaluateIns(_) => "EvaluateIns",
            Body::EvaluateRes(_) => "EvaluateRes",
            Body::FAQueryIns(_) => "FAQueryIns",
            Body::FAReportRes(_) => "FAReportRes",
            Body::RoundEnd(_) => "RoundEnd",
            Body::ErrorMsg(_) => "ErrorMsg",
        }
    }

    fn payload(&self) -> Result<Value, serde_json::Error> {
        match self {
            Body::JoinRequest(p) => serde_json::to_value(p),
            Body::JoinAccept(p) => serde_json::to_value(p),
            Body::TaskRequest(p) => serde_json::to_value(p),
            Body::TaskManifest(p) => serde_json::to_value(p),
            Body::FitIns(p) => serde_json::to_value(p),
            Body::FitRes(p) => serde_json::to_value(p),
            Body::EvaluateIns(p) => serde_json::to_value(p),
            Body::EvaluateRes(p) => serde_json::to_value(p),
            Body::FAQueryIns(p) => serde_json::to_value(p),
            Body::FAReportRes(p) => serde_json::to_value(p),
            Body::RoundEnd(p) => serde_json::to_value(p),
            Body::ErrorMsg(p) => serde_json::to_value(p),
        }
    }

    fn from_payload(ty: &str, payload: Value) -> Result<Body, DecodeError> {
        fn parse<T: DeserializeOwned>(v: Value) -> Result<T, DecodeError> {
            serde_json::from_value(v).map_err(|e| DecodeError::SchemaViolation(e.to_string()))
        }
        Ok(match ty {
            "JoinRequest" => Body::JoinRequest(parse(payload)?),
            "JoinAccept" => Body::JoinAccept(parse(payload)?),
            "TaskRequest" => Body::TaskRequest(parse(payload)?),
            "TaskManifest" => Body::TaskManifest(parse(payload)?),
            "FitIns" => Body::FitIns(parse(payload)?),
            "FitRes" => Body::FitRes(parse(payload)?),
            "EvaluateIns" => Body::EvaluateIns(parse(payload)?),
            "EvaluateRes" => Body::EvaluateRes(parse(payload)?),
            "FAQueryIns" => Body::FAQueryIns(parse(payload)?),
            "FAReportRes" => Body::FAReportRes(parse(payload)?),
            "RoundEnd" => Body::RoundEnd(parse(payload)?),
            "ErrorMsg" => Body::ErrorMsg(parse(payload)?),
            other => return Err(DecodeError::UnknownType(other.to_string())),
        })
    }

    /// JSON has no encoding for NaN or infinities; reject them before they turn into `null`.
    fn non_finite_field(&self) -> Option<&'static str> {
        let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Body::FitIns(p) if !all_finite(&p.params) => Some("params"),
            Body::FitRes(p) if !all_finite(&p.params) => Some("params"),
            Body::EvaluateIns(p) if !all_finite(&p.params) => Some("params"),
            Body::EvaluateRes(p) if !(p.loss.is_finite() && p.metric.is_finite()) => {
                Some("loss/metric")
            }
            Body::RoundEnd(p) if !all_finite(&p.global_params) => Some("global_params"),
            Body::FAReportRes(FAReportRes {
                payload: ReportPayload::Value(v),
                ..
            }) if !v.is_finite() => Some("payload"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub v: u32,
    pub session: String,
    pub body: Body,
}

impl Message {
    pub fn new(session: impl Into<String>, body: Body) -> Self {
        Message {
            v: PROTOCOL_VERSION,
            session: session.into(),
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("frame body of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("field {0} holds a non-finite number")]
    NonFinite(&'static str),
    #[error("serialization failed: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated: expected {expected} bytes, have {available}")]
    Truncated { expected: usize, available: usize },
    #[error("frame body of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("{0} bytes follow the frame")]
    TrailingBytes(usize),
    #[error("body is not valid JSON: {0}")]
    BadJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                // serializing a str cannot fail
                let _ = write!(out, "{}", Value::String(k.clone()));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => {
            let _ = write!(out, "{scalar}");
        }
    }
}

/// Serializes the JSON body (no length prefix) with sorted keys.
pub fn encode_body(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    if let Some(field) = msg.body.non_finite_field() {
        return Err(EncodeError::NonFinite(field));
    }
    let payload = msg
        .body
        .payload()
        .map_err(|e| EncodeError::Json(e.to_string()))?;
    let mut top = Map::new();
    top.insert("payload".into(), payload);
    top.insert("session".into(), Value::String(msg.session.clone()));
    top.insert("type".into(), Value::String(msg.body.type_name().into()));
    top.insert("v".into(), Value::from(msg.v));
    let mut out = String::new();
    write_canonical(&Value::Object(top), &mut out);
    if out.len() > MAX_FRAME {
        return Err(EncodeError::TooLarge(out.len()));
    }
    Ok(out.into_bytes())
}

/// Length prefix plus canonical JSON body.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let body = encode_body(msg)?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Parses a frame body (the bytes after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Message, DecodeError> {
    if body.len() > MAX_FRAME {
        return Err(DecodeError::TooLarge(body.len()));
    }
    let value: Value =
        serde_json::from_slice(body).map_err(|e| DecodeError::BadJson(e.to_string()))?;
    let Value::Object(mut top) = value else {
        return Err(DecodeError::SchemaViolation(
            "frame body must be a JSON object".into(),
        ));
    };
    if let Some(extra) = top
        .keys()
        .find(|k| !matches!(k.as_str(), "v" | "session" | "type" | "payload"))
    {
        return Err(DecodeError::SchemaViolation(format!(
            "unknown top-level field {extra:?}"
        )));
    }
    let v = match top.get("v") {
        Some(Value::Number(n)) => n.as_u64().ok_or_else(|| {
            DecodeError::SchemaViolation("v must be a non-negative integer".into())
        })?,
        Some(_) => {
            return Err(DecodeError::SchemaViolation(
                "v must be a non-negative integer".into(),
            ))
        }
        None => return Err(DecodeError::SchemaViolation("missing field v".into())),
    };
    if v != u64::from(PROTOCOL_VERSION) {
        return Err(DecodeError::UnsupportedVersion(v));
    }
    let ty = match top.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(DecodeError::SchemaViolation("type must be a string".into())),
        None => return Err(DecodeError::SchemaViolation("missing field type".into())),
    };
    if !MESSAGE_TYPES.contains(&ty.as_str()) {
        return Err(DecodeError::UnknownType(ty));
    }
    let session = match top.remove("session") {
        Some(Value::String(s)) => s,
        Some(_) => {
            return Err(DecodeError::SchemaViolation(
                "session must be a string".into(),
            ))
        }
        None => return Err(DecodeError::SchemaViolation("missing field session".into())),
    };
    let payload = top
        .remove("payload")
        .ok_or_else(|| DecodeError::SchemaViolation("missing field payload".into()))?;
    let body = Body::from_payload(&ty, payload)?;
    Ok(Message {
        v: PROTOCOL_VERSION,
        session,
        body,
    })
}

/// Parses exactly one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated {
            expected: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME {
        return Err(DecodeError::TooLarge(len));
    }
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(DecodeError::Truncated {
            expected: len,
            available: rest.len(),
        });
    }
    if rest.len() > len {
        return Err(DecodeError::TrailingBytes(rest.len() - len));
    }
    decode_body(rest)
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any prefix byte.
pub async fn read_message<R: AsyncRead + Unpin>(
    reader: &mut R,
) -> Result<Option<Message>, FrameError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = reader.read(&mut prefix[got..]).await?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(DecodeError::Truncated {
                expected: 4,
                available: got,
            }
            .into());
        }
        got += n;
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(DecodeError::TooLarge(len).into());
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FrameError::Decode(DecodeError::Truncated {
                expected: len,
                available: 0,
            })
        } else {
            FrameError::Io(e)
        }
    })?;
    Ok(Some(decode_body(&body)?))
}

pub async fn write_message<W: AsyncWrite + Unpin>(
    writer: &mut W,
    msg: &Message,
) -> Result<(), FrameError> {
    let frame = encode_message(msg)?;
    writer.write_all(&frame).await?;
    writer.flush().await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{BucketSpec, FAQueryKind, HeavyHittersQuery};
    use crate::trainer::BatchSize;

    fn hp() -> Hyperparams {
        Hyperparams {
            learning_rate: 0.5,
            epochs: 2,
            batch_size: BatchSize::Size(8),
            seed: 3,
        }
    }

    const GOLDEN_FRAMES: &str = include_str!("../tests/fixtures/golden_frames.txt");

    fn frame_of(body: &str) -> Vec<u8> {
        let mut f = (body.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(body.as_bytes());
        f
    }

    #[test]
    fn length_prefix_is_big_endian() {
        assert_eq!(&frame_of("{\"v\":1}")[..4], &[0, 0, 0, 7]);
        let msg = Message::new(
            "s",
            Body::ErrorMsg(ErrorMsg {
                code: "X".into(),
                detail: "".into(),
            }),
        );
        let f = encode_message(&msg).unwrap();
        assert_eq!(
            u32::from_be_bytes([f[0], f[1], f[2], f[3]]) as usize,
            f.len() - 4
        );
    }

    #[test]
    fn golden_frames() {
        let spec = ModelSpec::linear("m", 1);
        let dp = DPConfig::disabled();
        let cases: Vec<Body> = vec![
            Body::JoinRequest(JoinRequest {
                client_id: "c1".into(),
                platform: Platform::IndexKeyed,
                app_version: "1.0".into(),
            }),
            Body::JoinAccept(JoinAccept {
                round: 1,
                model_spec: Some(spec),
            }),
            Body::TaskRequest(TaskRequest {
                platform: Platform::NameKeyed,
                app_version: "1.0".into(),
            }),
            Body::TaskManifest(TaskManifest {
                tasks: vec![TaskEntry {
                    task_id: "t".into(),
                    model_id: Some("m".into()),
                    model_version: Some(2),
                    kind: SessionKind::FL,
                    port: 9001,
                    hyperparams: Some(hp()),
                    dp,
                }],
            }),
            Body::FitIns(FitIns {
                round: 2,
                params: vec![0.25, -1.0],
                hyperparams: hp(),
            }),
            Body::FitRes(FitRes {
                round: 2,
                params: vec![0.5],
                num_examples: 30,
            }),
            Body::EvaluateIns(EvaluateIns {
                round: 3,
                params: vec![1.5],
            }),
            Body::EvaluateRes(EvaluateRes {
                round: 3,
                loss: 0.125,
                metric: 0.75,
                num_examples: 4,
            }),
            Body::FAQueryIns(FAQueryIns {
                query: FAQuery {
                    query_id: "q".into(),
                    kind: FAQueryKind::HeavyHitters(HeavyHittersQuery {
                        buckets: BucketSpec {
                            edges: vec![0.0, 1.0, 2.0],
                            clamp: true,
                        },
                        k: 1,
                        epsilon: 4.0,
                        cluster_by: "cluster".into(),
                    }),
                },
            }),
            Body::FAReportRes(FAReportRes {
                pseudonym: Pseudonym("ab".into()),
                payload: ReportPayload::Bucket(3),
                cluster: None,
            }),
            Body::RoundEnd(RoundEnd {
                round: 4,
                global_params: vec![],
                done: true,
            }),
            Body::ErrorMsg(ErrorMsg {
                code: "Busy".into(),
                detail: "try later".into(),
            }),
        ];
        let goldens: Vec<&str> = GOLDEN_FRAMES.lines().collect();
        assert_eq!(cases.len(), MESSAGE_TYPES.len());
        assert_eq!(goldens.len(), cases.len());
        for (body, golden) in cases.into_iter().zip(goldens) {
            let msg = Message::new("s", body);
            let bytes = encode_message(&msg).unwrap();
            assert_eq!(String::from_utf8_lossy(&bytes[4..]), golden);
            assert_eq!(bytes, frame_of(golden));
            assert_eq!(decode_message(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn decode_errors() {
        let mut f = frame_of(r#"{"v":1}"#);
        f[3] = 10;
        f.truncate(9);
        assert_eq!(
            decode_message(&f),
            Err(DecodeError::Truncated {
                expected: 10,
                available: 5
            })
        );
        assert!(matches!(
            decode_message(&[0, 0]),
            Err(DecodeError::Truncated { .. })
        ));

        let unknown = r#"{"payload":{},"session":"s","type":"Frobnicate","v":1}"#;
        assert_eq!(
            decode_message(&frame_of(unknown)),
            Err(DecodeError::UnknownType("Frobnicate".into()))
        );

        let v2 = r#"{"payload":{"code":"a","detail":"b"},"session":"s","type":"ErrorMsg","v":2}"#;
        assert_eq!(
            decode_message(&frame_of(v2)),
            Err(DecodeError::UnsupportedVersion(2))
        );

        let extra_top =
            r#"{"payload":{"code":"a","detail":"b"},"session":"s","type":"ErrorMsg","v":1,"x":0}"#;
        assert!(matches!(
            decode_message(&frame_of(extra_top)),
            Err(DecodeError::SchemaViolation(_))
        ));

        let extra_payload =
            r#"{"payload":{"code":"a","detail":"b","z":1},"session":"s","type":"ErrorMsg","v":1}"#;
        assert!(matches!(
            decode_message(&frame_of(extra_payload)),
            Err(DecodeError::SchemaViolation(_))
        ));

        let missing = r#"{"payload":{"code":"a"},"session":"s","type":"ErrorMsg","v":1}"#;
        assert!(matches!(
            decode_message(&frame_of(missing)),
            Err(DecodeError::SchemaViolation(_))
        ));

        let missing_nullable = r#"{"payload":{"pseudonym":"p","payload":{"Bucket":1}},"session":"s","type":"FAReportRes","v":1}"#;
        assert!(matches!(
            decode_message(&frame_of(missing_nullable)),
            Err(DecodeError::SchemaViolation(_))
        ));

        assert!(matches!(
            decode_message(&frame_of("{nope")),
            Err(DecodeError::BadJson(_))
        ));
        assert!(matches!(
            decode_message(&frame_of("[1]")),
            Err(DecodeError::SchemaViolation(_))
        ));

        let mut long = frame_of(r#"{"v":1}"#);
        long.push(b' ');
        assert_eq!(decode_message(&long), Err(DecodeError::TrailingBytes(1)));

        let huge = [0x01, 0x00, 0x00, 0x01];
        assert_eq!(
            decode_message(&huge),
            Err(DecodeError::TooLarge(MAX_FRAME + 1))
        );
    }

    #[test]
    fn oversized_and_non_finite_payloads_are_refused() {
        let big = Message::new(
            "s",
            Body::FitRes(FitRes {
                round: 1,
                params: vec![0.123456789; 2_000_000],
                num_examples: 1,
            }),
        );
        assert!(matches!(
            encode_message(&big),
            Err(EncodeError::TooLarge(_))
        ));
        let nan = Message::new(
            "s",
            Body::FitRes(FitRes {
                round: 1,
                params: vec![f64::NAN],
                num_examples: 1,
            }),
        );
        assert_eq!(encode_message(&nan), Err(EncodeError::NonFinite("params")));
    }

    #[tokio::test]
    async fn stream_framing() {
        let a = Message::new(
            "s",
            Body::RoundEnd(RoundEnd {
                round: 1,
                global_params: vec![1.0],
                done: false,
            }),
        );
        let b = Message::new(
            "s",
            Body::ErrorMsg(ErrorMsg {
                code: "c".into(),
                detail: "d".into(),
            }),
        );
        let mut buf = Vec::new();
        write_message(&mut buf, &a).await.unwrap();
        write_message(&mut buf, &b).await.unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_message(&mut r).await.unwrap(), Some(a));
        assert_eq!(read_message(&mut r).await.unwrap(), Some(b));
        assert_eq!(read_message(&mut r).await.unwrap(), None);
        let mut cut = &buf[..6];
        assert!(matches!(
            read_message(&mut cut).await,
            Err(FrameError::Decode(DecodeError::Truncated { .. }))
        ));
    }
}
