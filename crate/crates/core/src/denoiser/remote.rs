//! Client for an out-of-process denoiser speaking newline-delimited JSON
//! (protocol version 1) over TCP or a child process's stdio.
//!
//! Tensor payloads are base64 of raw little-endian `f32` in `C×H×W` order.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ActiveLora, Codec, Denoiser, DenoiserCall, NfeCounter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `HOST:PORT`
    Tcp(String),
    /// Command line of a child process, split on whitespace.
    Stdio(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            if cmd.trim().is_empty() {
                return Err(Error::invalid("stdio endpoint needs a command"));
            }
            return Ok(Endpoint::Stdio(cmd.to_string()));
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Endpoint::Tcp(s.to_string()))
            }
            _ => Err(Error::invalid(format!(
                "endpoint {s:?} is neither HOST:PORT nor stdio:CMD"
            ))),
        }
    }
}

/// Peer description returned by the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloInfo {
    pub version: u32,
    pub capabilities: Vec<String>,
    pub latent_shape: Option<[usize; 3]>,
}

impl HelloInfo {
    pub fn supports(&self, capability: &str) -> bool {
        self.capabilities.iter().any(|c| c == capability)
    }
}

#[derive(Serialize)]
struct HelloRequest {
    v: u32,
    op: &'static str,
}

#[derive(Serialize)]
struct DepthPayload {
    shape: [usize; 3],
    data: String,
}

#[derive(Serialize)]
struct DenoiseRequest<'a> {
    v: u32,
    op: &'static str,
    t: usize,
    shape: [usize; 3],
    z: String,
    ev: f64,
    ev_min: f64,
    guidance: f64,
    lora: &'a ActiveLora,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<DepthPayload>,
}

#[derive(Serialize)]
struct EncodeRequest {
    v: u32,
    op: &'static str,
    shape: [usize; 3],
    image: String,
}

#[derive(Serialize)]
struct DecodeRequest {
    v: u32,
    op: &'static str,
    shape: [usize; 3],
    z: String,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct Reply {
    v: Option<u32>,
    error: Option<String>,
    capabilities: Option<Vec<String>>,
    latent_shape: Option<[usize; 3]>,
    shape: Option<[usize; 3]>,
    eps: Option<String>,
    z: Option<String>,
    image: Option<String>,
}

pub(crate) fn encode_f32(data: &[f32]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_f32(payload: &str, shape: [usize; 3]) -> Result<Tensor> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Protocol(format!(
            "malformed response length: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(shape, data)?;
    if !t.is_finite() {
        return Err(Error::Protocol("non-finite values in response".into()));
    }
    Ok(t)
}

enum Link {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Stdio {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    },
}

struct Connection {
    link: Link,
    timeout: Duration,
}

fn conn_err(e: impl std::fmt::Display) -> Error {
    Error::Connection(e.to_string())
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let link = match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| conn_err(format!("{addr}: {e}")))?
                    .next()
                    .ok_or_else(|| conn_err(format!("{addr}: no address")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)
                    .map_err(|e| conn_err(format!("{addr}: {e}")))?;
                stream.set_read_timeout(Some(timeout)).map_err(conn_err)?;
                stream.set_write_timeout(Some(timeout)).map_err(conn_err)?;
                stream.set_nodelay(true).map_err(conn_err)?;
                let writer = stream.try_clone().map_err(conn_err)?;
                Link::Tcp {
                    reader: BufReader::new(stream),
                    writer,
                }
            }
            Endpoint::Stdio(cmd) => {
                let mut parts = cmd.split_whitespace();
                let program = parts.next().ok_or_else(|| conn_err("empty command"))?;
                let mut child = Command::new(program)
                    .args(parts)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| conn_err(format!("{program}: {e}")))?;
                let stdin = child.stdin.take().ok_or_else(|| conn_err("no stdin"))?;
                let stdout = child.stdout.take().ok_or_else(|| conn_err("no stdout"))?;
                let (tx, rx) = mpsc::channel();
                thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Link::Stdio {
                    child,
                    stdin,
                    lines: rx,
                }
            }
        };
        Ok(Self { link, timeout })
    }

    fn send(&mut self, line: &str) -> Result<()> {
        let w: &mut dyn Write = match &mut self.link {
            Link::Tcp { writer, .. } => writer,
            Link::Stdio { stdin, .. } => stdin,
        };
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(conn_err)
    }

    fn recv(&mut self) -> Result<String> {
        match &mut self.link {
            Link::Tcp { reader, .. } => {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => Err(conn_err("peer closed the connection")),
                    Ok(_) => Ok(line),
                    Err(e)
                        if matches!(
                            e.kind(),
                            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                        ) =>
                    {
                        Err(conn_err(format!("timed out after {:?}", self.timeout)))
                    }
                    Err(e) => Err(conn_err(e)),
                }
            }
            Link::Stdio { lines, .. } => match lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => Ok(line),
                Ok(Err(e)) => Err(conn_err(e)),
                Err(RecvTimeoutError::Timeout) => {
                    Err(conn_err(format!("timed out after {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => Err(conn_err("peer closed its output")),
            },
        }
    }

    fn request<T: Serialize>(&mut self, msg: &T) -> Result<Reply> {
        let line = serde_json::to_string(msg).map_err(|e| Error::Protocol(e.to_string()))?;
        self.send(&line)?;
        let reply = self.recv()?;
        let reply: Reply = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Protocol(format!("unparseable response: {e}")))?;
        if let Some(v) = reply.v {
            if v != PROTOCOL_VERSION {
                return Err(Error::Protocol(format!(
                    "protocol version mismatch: peer speaks {v}, client speaks {PROTOCOL_VERSION}"
                )));
            }
        }
        if let Some(err) = reply.error {
            return Err(Error::Protocol(format!("peer reported: {err}")));
        }
        Ok(reply)
    }

    fn hello(&mut self) -> Result<HelloInfo> {
        let reply = self.request(&HelloRequest {
            v: PROTOCOL_VERSION,
            op: "hello",
        })?;
        let version = reply
            .v
            .ok_or_else(|| Error::Protocol("handshake reply lacks a version".into()))?;
        Ok(HelloInfo {
            version,
            capabilities: reply.capabilities.unwrap_or_default(),
            latent_shape: reply.latent_shape,
        })
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Link::Stdio { child, .. } = &mut self.link {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct PoolState {
    idle: Vec<Connection>,
    open: usize,
}

/// Denoiser backed by a remote process. Calls check a connection out of a
/// small pool, so concurrent ball generations can run in parallel over TCP;
/// a stdio peer has a single connection and serializes calls.
pub struct RemoteDenoiser {
    endpoint: Endpoint,
    timeout: Duration,
    hello: HelloInfo,
    max_connections: usize,
    pool: Mutex<PoolState>,
    returned: Condvar,
    counter: Arc<NfeCounter>,
}

impl RemoteDenoiser {
    pub fn connect(endpoint: Endpoint) -> Result<Self> {
        Self::connect_with_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(endpoint: Endpoint, timeout: Duration) -> Result<Self> {
        let mut conn = Connection::open(&endpoint, timeout)?;
        let hello = conn.hello()?;
        if !hello.supports("denoise") {
            return Err(Error::Protocol(
                "peer does not advertise the denoise capability".into(),
            ));
        }
        let max_connections = match endpoint {
            Endpoint::Tcp(_) => rayon::current_num_threads().max(1),
            Endpoint::Stdio(_) => 1,
        };
        Ok(Self {
            endpoint,
            timeout,
            hello,
            max_connections,
            pool: Mutex::new(PoolState {
                idle: vec![conn],
                open: 1,
            }),
            returned: Condvar::new(),
            counter: Arc::new(NfeCounter::new()),
        })
    }

    pub fn hello_info(&self) -> &HelloInfo {
        &self.hello
    }

    /// Calls sent to the peer, counted when the request is written.
    pub fn counter(&self) -> &Arc<NfeCounter> {
        &self.counter
    }

    fn checkout(&self) -> Result<Connection> {
        let mut state = self.pool.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(conn) = state.idle.pop() {
                return Ok(conn);
            }
            if state.open < self.max_connections {
                state.open += 1;
                drop(state);
                let opened = Connection::open(&self.endpoint, self.timeout).and_then(|mut c| {
                    c.hello()?;
                    Ok(c)
                });
                if opened.is_err() {
                    self.release(None);
                }
                return opened;
            }
            state = self.returned.wait(state).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn release(&self, conn: Option<Connection>) {
        let mut state = self.pool.lock().unwrap_or_else(|p| p.into_inner());
        match conn {
            Some(c) => state.idle.push(c),
            None => state.open -= 1,
        }
        self.returned.notify_one();
    }

    /// Runs one request/response exchange. Connections that failed at the
    /// transport level are discarded; those that returned a well-framed error
    /// stay in the pool.
    fn exchange<T: Serialize>(&self, msg: &T, before_send: impl FnOnce()) -> Result<Reply> {
        let mut conn = self.checkout()?;
        before_send();
        let result = conn.request(msg);
        let healthy = !matches!(result, Err(Error::Connection(_)));
        self.release(healthy.then_some(conn));
        result
    }
}

impl Denoiser for RemoteDenoiser {
    fn predict_noise(&self, call: &DenoiserCall<'_>) -> Result<Tensor> {
        let shape = call.z.shape();
        let depth = match (&call.cond.control, self.hello.supports("depth")) {
            (Some(d), true) => Some(DepthPayload {
                shape: d.shape(),
                data: encode_f32(d.data()),
            }),
            _ => None,
        };
        let req = DenoiseRequest {
            v: PROTOCOL_VERSION,
            op: "denoise",
            t: call.t,
            shape,
            z: encode_f32(call.z.data()),
            ev: call.cond.ev,
            ev_min: call.cond.ev_min,
            guidance: call.cond.guidance_scale,
            lora: call.lora,
            seed: call.run_seed,
            depth,
        };
        let reply = self.exchange(&req, || self.counter.record(&call.lora.name))?;
        let eps = reply
            .eps
            .ok_or_else(|| Error::Protocol("denoise reply lacks eps".into()))?;
        let reply_shape = reply.shape.unwrap_or(shape);
        if reply_shape != shape {
            return Err(Error::Protocol(format!(
                "response shape {reply_shape:?} differs from request {shape:?}"
            )));
        }
        decode_f32(&eps, shape)
    }

    fn codec(&self) -> &dyn Codec {
        self
    }
}

impl Codec for RemoteDenoiser {
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if !self.hello.supports("encode") {
            return Ok(image.clone());
        }
        let reply = self.exchange(
            &EncodeRequest {
                v: PROTOCOL_VERSION,
                op: "encode",
                shape: image.shape(),
                image: encode_f32(image.data()),
            },
            || {},
        )?;
        let shape = reply
            .shape
            .ok_or_else(|| Error::Protocol("encode reply lacks shape".into()))?;
        decode_f32(
            &reply
                .z
                .ok_or_else(|| Error::Protocol("encode reply lacks z".into()))?,
            shape,
        )
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if !self.hello.supports("decode") {
            return Ok(z.clone());
        }
        let reply = self.exchange(
            &DecodeRequest {
                v: PROTOCOL_VERSION,
                op: "decode",
                shape: z.shape(),
                z: encode_f32(z.data()),
            },
            || {},
        )?;
        let shape = reply
            .shape
            .ok_or_else(|| Error::Protocol("decode reply lacks shape".into()))?;
        decode_f32(
            &reply
                .image
                .ok_or_else(|| Error::Protocol("decode reply lacks image".into()))?,
            shape,
        )
    }
}
