//! Newline-delimited JSON over TCP.
//!
//! One UTF-8 JSON object per line in each direction:
//!
//! ```text
//! → {"id": 7, "input": [0.1, 0.2, ...]}
//! ← {"id": 7, "probs": [0.9, 0.05, 0.05]}
//! ← {"id": 7, "error": "budget_exceeded"}
//! ```
//!
//! `input` is the flattened sample. Hard-label oracles answer with one-hot
//! `probs`. A malformed line gets an error object (with `id` when one could be
//! recovered, `null` otherwise) and the connection stays open.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OracleResponse, PredictionApi, PredictionOracle, ResponseMode};
use crate::error::{Error, Result};
use crate::model::check_batch;
use crate::tensor::Tensor;

pub const BUDGET_EXCEEDED: &str = "budget_exceeded";

const PIPELINE_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: i64,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Probs { id: i64, probs: Vec<f64> },
    Error { id: Option<i64>, error: String },
}

/// Answers one protocol line against an oracle.
pub fn handle_line(oracle: &PredictionOracle, line: &str) -> Response {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(Value::as_i64));
            return Response::Error {
                id,
                error: format!("malformed_request: {e}"),
            };
        }
    };
    let id = request.id;
    let result = Tensor::new(oracle.input_shape().to_vec(), request.input)
        .map_err(|e| Error::dim(e.to_string()))
        .and_then(|x| oracle.query(&x));
    match result {
        Ok(resp) => Response::Probs {
            id,
            probs: resp.to_distribution(oracle.class_count()),
        },
        Err(Error::BudgetExceeded { .. }) => Response::Error {
            id: Some(id),
            error: BUDGET_EXCEEDED.into(),
        },
        Err(e) => Response::Error {
            id: Some(id),
            error: e.to_string(),
        },
    }
}

fn serve_connection(oracle: &PredictionOracle, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(oracle, &line);
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// A bound listener serving one oracle; every connection gets its own thread
/// and all connections share the oracle's ledger.
pub struct OracleServer {
    listener: TcpListener,
    oracle: Arc<PredictionOracle>,
}

impl OracleServer {
    pub fn bind(addr: impl ToSocketAddrs, oracle: Arc<PredictionOracle>) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            oracle,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until the process exits.
    pub fn run(self) -> Result<()> {
        let stop = Arc::new(AtomicBool::new(false));
        self.accept_loop(&stop);
        Ok(())
    }

    /// Serves on a background thread until the handle is shut down.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || self.accept_loop(&flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    fn accept_loop(self, stop: &AtomicBool) {
        for stream in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let oracle = Arc::clone(&self.oracle);
            std::thread::spawn(move || {
                let _ = serve_connection(&oracle, stream);
            });
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client side of the protocol, usable anywhere a [`PredictionApi`] is.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    input_shape: Vec<usize>,
    class_count: usize,
    mode: ResponseMode,
    next_id: AtomicU64,
}

impl RemoteOracle {
    /// The protocol carries no metadata, so the caller states the shapes and
    /// the response mode it expects.
    pub fn connect(
        addr: impl ToSocketAddrs,
        input_shape: &[usize],
        class_count: usize,
        mode: ResponseMode,
    ) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            conn: Mutex::new(Connection {
                reader: BufReader::new(stream.try_clone()?),
                writer: stream,
            }),
            input_shape: input_shape.to_vec(),
            class_count,
            mode,
            next_id: AtomicU64::new(0),
        })
    }

    /// Sends raw protocol lines and returns the raw response lines.
    pub fn exchange_raw(&self, lines: &[String]) -> Result<Vec<String>> {
        let mut conn = self.conn.lock().unwrap();
        for l in lines {
            conn.writer.write_all(l.as_bytes())?;
            conn.writer.write_all(b"\n")?;
        }
        conn.writer.flush()?;
        let mut out = Vec::with_capacity(lines.len());
        for _ in lines {
            let mut buf = String::new();
            if conn.reader.read_line(&mut buf)? == 0 {
                return Err(Error::Remote("server closed the connection".into()));
            }
            out.push(buf.trim_end().to_string());
        }
        Ok(out)
    }

    fn decode(&self, expected_id: i64, line: &str) -> Result<OracleResponse> {
        let resp: Response = serde_json::from_str(line)
            .map_err(|e| Error::Remote(format!("unparseable response `{line}`: {e}")))?;
        match resp {
            Response::Probs { id, probs } if id == expected_id => {
                if probs.len() != self.class_count {
                    return Err(Error::Remote(format!(
                        "expected {} probabilities, got {}",
                        self.class_count,
                        probs.len()
                    )));
                }
                Ok(match self.mode {
                    ResponseMode::ProbabilityVector => OracleResponse::Probabilities(probs),
                    ResponseMode::HardLabel => OracleResponse::Label(crate::tensor::argmax(&probs)),
                })
            }
            Response::Probs { id, .. } => Err(Error::Remote(format!(
                "response id {id} does not match request {expected_id}"
            ))),
            Response::Error { error, .. } if error == BUDGET_EXCEEDED => {
                Err(Error::BudgetExceeded {
                    requested: 1,
                    remaining: 0,
                })
            }
            Response::Error { error, .. } => Err(Error::Remote(error)),
        }
    }

    fn send_rows(&self, rows: &[&[f64]]) -> Result<Vec<OracleResponse>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(PIPELINE_DEPTH) {
            let ids: Vec<i64> = chunk
                .iter()
                .map(|_| self.next_id.fetch_add(1, Ordering::SeqCst) as i64)
                .collect();
            let lines = chunk
                .iter()
                .zip(&ids)
                .map(|(row, &id)| {
                    serde_json::to_string(&Request {
                        id,
                        input: row.to_vec(),
                    })
                    .map_err(|e| Error::Remote(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let replies = self.exchange_raw(&lines)?;
            for (id, line) in ids.into_iter().zip(replies) {
                out.push(self.decode(id, &line)?);
            }
        }
        Ok(out)
    }
}

impl PredictionApi for RemoteOracle {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn mode(&self) -> ResponseMode {
        self.mode
    }

    fn remaining(&self) -> Option<usize> {
        None
    }

    fn query(&self, input: &Tensor) -> Result<OracleResponse> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "query shape {:?} does not match input shape {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        Ok(self.send_rows(&[input.data()])?.remove(0))
    }

    fn query_batch(&self, inputs: &Tensor) -> Result<Vec<OracleResponse>> {
        check_batch(inputs, &self.input_shape)?;
        let rows: Vec<&[f64]> = (0..inputs.rows()).map(|i| inputs.row(i)).collect();
        self.send_rows(&rows)
    }
}
