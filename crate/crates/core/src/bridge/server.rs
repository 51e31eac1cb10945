//! Minimal in-process reference server that mirrors a toy policy. Used for
//! loopback tests of the client and by `adwin serve`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::protocol::{Message, PolicyRequest, PolicyResponse, RequestKind, PROTOCOL_VERSION};
use crate::policy::{Context, PolicyParams};
use crate::sampling::sample_token;

fn answer(policy: &PolicyParams, req: &PolicyRequest) -> PolicyResponse {
    let vocab = policy.vocab();
    if let Some(&bad) = req.context.iter().find(|&&t| vocab.check(t).is_err()) {
        return PolicyResponse::error(req.request_id, format!("token {bad} out of range"));
    }
    let dist = policy.distribution(Context::flat(&req.context));
    match req.kind {
        RequestKind::Logprobs => PolicyResponse {
            request_id: req.request_id,
            log_probs: Some(dist.log_probs),
            ..PolicyResponse::default()
        },
        RequestKind::Topk => {
            let k = match req.k {
                Some(k) if k >= 1 => k.min(vocab.size()),
                _ => return PolicyResponse::error(req.request_id, "topk requires k >= 1"),
            };
            let mut order: Vec<usize> = (0..vocab.size()).collect();
            order.sort_by(|&a, &b| dist.log_probs[b].total_cmp(&dist.log_probs[a]).then(a.cmp(&b)));
            PolicyResponse {
                request_id: req.request_id,
                topk_pairs: Some(
                    order[..k]
                        .iter()
                        .map(|&t| (t as u32, dist.log_probs[t]))
                        .collect(),
                ),
                ..PolicyResponse::default()
            }
        }
        RequestKind::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(0));
            PolicyResponse {
                request_id: req.request_id,
                sampled: Some(sample_token(&dist, 1.0, &mut rng)),
                ..PolicyResponse::default()
            }
        }
    }
}

/// Best-effort request id from a frame that failed to parse as a request.
fn salvage_id(line: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("request_id").and_then(|i| i.as_u64()))
        .unwrap_or(0)
}

/// Serves one connection until the peer closes it.
pub fn serve_connection(stream: TcpStream, policy: &PolicyParams) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    let mut greeted = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let reply = match Message::parse(&line) {
            Ok(Message::Hello { .. }) => {
                greeted = true;
                Message::Hello {
                    version: PROTOCOL_VERSION,
                    vocab_size: policy.vocab().size(),
                }
            }
            Ok(Message::Request(req)) if greeted => Message::Response(answer(policy, &req)),
            Ok(Message::Request(req)) => {
                Message::Response(PolicyResponse::error(req.request_id, "handshake required"))
            }
            Ok(_) => Message::Error {
                message: "unexpected message type".into(),
            },
            Err(e) => Message::Response(PolicyResponse::error(
                salvage_id(&line),
                format!("malformed request: {e}"),
            )),
        };
        writer.write_all(reply.to_line().as_bytes())?;
    }
}

/// Background accept loop; one thread per connection.
pub struct PolicyServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl PolicyServer {
    pub fn spawn(policy: PolicyParams, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let policy = Arc::new(policy);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let policy = policy.clone();
                std::thread::spawn(move || {
                    let _ = serve_connection(stream, &policy);
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }
}

impl Drop for PolicyServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
