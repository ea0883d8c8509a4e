//! Socket adapter for external renderers and embedders.
//!
//! Wire format: each message is a 4-byte big-endian length followed by that
//! many bytes of UTF-8 JSON. The client sends one request and reads one
//! response per call. Requests are tagged by `op`:
//!
//! | op                  | request fields          | response fields             |
//! |---------------------|-------------------------|-----------------------------|
//! | `info`              |                         | `param_dim`, `feature_dim`, `embed_dim` |
//! | `render`            | `x`                     | `values` (features)         |
//! | `render_vjp`        | `x`, `upstream`         | `values` (grad w.r.t. x)    |
//! | `embed_text`        | `text`                  | `values` (embedding)        |
//! | `embed_feature`     | `features`              | `values` (embedding)        |
//! | `embed_feature_vjp` | `features`, `upstream`  | `values` (grad w.r.t. f)    |
//!
//! Every response carries `ok: bool`; failures set `ok: false` and `error`.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Embedder, Renderer, SemanticError};
use crate::schema::ParameterVector;

/// Upper bound on a single frame.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Info,
    Render { x: Vec<f64> },
    RenderVjp { x: Vec<f64>, upstream: Vec<f64> },
    EmbedText { text: String },
    EmbedFeature { features: Vec<f64> },
    EmbedFeatureVjp { features: Vec<f64>, upstream: Vec<f64> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::other("frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Client side of the protocol, usable as both [`Renderer`] and [`Embedder`].
pub struct RemoteStack {
    stream: Mutex<TcpStream>,
    param_dim: usize,
    feature_dim: usize,
    embed_dim: usize,
}

impl RemoteStack {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, SemanticError> {
        let stream = TcpStream::connect(addr).map_err(|e| SemanticError::Adapter(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let mut stack = RemoteStack { stream: Mutex::new(stream), param_dim: 0, feature_dim: 0, embed_dim: 0 };
        let info = stack.call(&Request::Info)?;
        let dim = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| SemanticError::Adapter(format!("info response lacks {what}")))
        };
        stack.param_dim = dim(info.param_dim, "param_dim")?;
        stack.feature_dim = dim(info.feature_dim, "feature_dim")?;
        stack.embed_dim = dim(info.embed_dim, "embed_dim")?;
        Ok(stack)
    }

    fn call(&self, req: &Request) -> Result<Response, SemanticError> {
        let io_err = |e: io::Error| SemanticError::Adapter(e.to_string());
        let payload = serde_json::to_vec(req).map_err(|e| SemanticError::Adapter(e.to_string()))?;
        let mut stream = self.stream.lock().map_err(|_| SemanticError::Adapter("poisoned connection".into()))?;
        write_frame(&mut *stream, &payload).map_err(io_err)?;
        let raw = read_frame(&mut *stream).map_err(io_err)?;
        let resp: Response = serde_json::from_slice(&raw).map_err(|e| SemanticError::Adapter(e.to_string()))?;
        if !resp.ok {
            return Err(SemanticError::Adapter(resp.error.unwrap_or_else(|| "remote error".into())));
        }
        Ok(resp)
    }

    fn values(&self, req: &Request, expected: usize) -> Result<DVector<f64>, SemanticError> {
        let values = self.call(req)?.values.ok_or_else(|| SemanticError::Adapter("response lacks values".into()))?;
        if values.len() != expected {
            return Err(SemanticError::Dimension { expected, actual: values.len() });
        }
        Ok(DVector::from_vec(values))
    }
}

impl Renderer for RemoteStack {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn render(&self, x: &ParameterVector) -> Result<DVector<f64>, SemanticError> {
        self.values(&Request::Render { x: x.values().to_vec() }, self.feature_dim)
    }

    fn render_vjp(&self, x: &ParameterVector, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        let req = Request::RenderVjp { x: x.values().to_vec(), upstream: upstream.iter().copied().collect() };
        self.values(&req, self.param_dim)
    }
}

impl Embedder for RemoteStack {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn embed_text(&self, text: &str) -> Result<DVector<f64>, SemanticError> {
        self.values(&Request::EmbedText { text: text.into() }, self.embed_dim)
    }

    fn embed_feature(&self, f: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        self.values(&Request::EmbedFeature { features: f.iter().copied().collect() }, self.embed_dim)
    }

    fn embed_feature_vjp(&self, f: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>, SemanticError> {
        let req = Request::EmbedFeatureVjp {
            features: f.iter().copied().collect(),
            upstream: upstream.iter().copied().collect(),
        };
        self.values(&req, self.feature_dim)
    }
}

/// Answers one request with a local renderer/embedder pair.
pub fn handle_request(req: Request, renderer: &dyn Renderer, embedder: &dyn Embedder) -> Response {
    let values = |r: Result<DVector<f64>, SemanticError>| match r {
        Ok(v) => Response { ok: true, values: Some(v.iter().copied().collect()), ..Default::default() },
        Err(e) => Response { ok: false, error: Some(e.to_string()), ..Default::default() },
    };
    match req {
        Request::Info => Response {
            ok: true,
            param_dim: Some(renderer.param_dim()),
            feature_dim: Some(renderer.feature_dim()),
            embed_dim: Some(embedder.embed_dim()),
            ..Default::default()
        },
        Request::Render { x } => values(renderer.render(&ParameterVector::from_vec(x))),
        Request::RenderVjp { x, upstream } => {
            values(renderer.render_vjp(&ParameterVector::from_vec(x), &DVector::from_vec(upstream)))
        }
        Request::EmbedText { text } => values(embedder.embed_text(&text)),
        Request::EmbedFeature { features } => values(embedder.embed_feature(&DVector::from_vec(features))),
        Request::EmbedFeatureVjp { features, upstream } => {
            values(embedder.embed_feature_vjp(&DVector::from_vec(features), &DVector::from_vec(upstream)))
        }
    }
}

fn serve_connection(mut stream: TcpStream, renderer: &dyn Renderer, embedder: &dyn Embedder) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    loop {
        let raw = match read_frame(&mut stream) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        let resp = match serde_json::from_slice::<Request>(&raw) {
            Ok(req) => handle_request(req, renderer, embedder),
            Err(e) => Response { ok: false, error: Some(format!("bad request: {e}")), ..Default::default() },
        };
        write_frame(&mut stream, &serde_json::to_vec(&resp).map_err(io::Error::other)?)?;
    }
}

/// Serves a renderer/embedder pair on `listener`, one thread per connection.
/// Returns when the listener fails.
pub fn serve(listener: TcpListener, renderer: Arc<dyn Renderer>, embedder: Arc<dyn Embedder>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let (r, e) = (Arc::clone(&renderer), Arc::clone(&embedder));
        thread::spawn(move || {
            if let Err(err) = serve_connection(stream, r.as_ref(), e.as_ref()) {
                log::warn!("adapter connection closed: {err}");
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{\"op\":\"info\"}").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 13]);
        let back = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b"{\"op\":\"info\"}");
    }

    #[test]
    fn request_encoding() {
        let json = serde_json::to_string(&Request::Render { x: vec![1.0, 2.0] }).unwrap();
        assert_eq!(json, r#"{"op":"render","x":[1.0,2.0]}"#);
        let back: Request = serde_json::from_str(r#"{"op":"embed_text","text":"bigger nose"}"#).unwrap();
        assert_eq!(back, Request::EmbedText { text: "bigger nose".into() });
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&u32::MAX.to_be_bytes());
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }
}
