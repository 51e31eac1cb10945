use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{
    Message, PolicyRequest, PolicyResponse, RequestKind, PIPELINE_WINDOW, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};
use crate::policy::{ConditionalDistribution, Context, TeacherPolicy, TokenId, TokenSequence, Vocabulary};

/// Client-side normalization tolerance for remote log-prob vectors.
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn io_error(e: std::io::Error, what: &str) -> Error {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::Timeout(what.to_string()),
        _ => Error::Io(e),
    }
}

/// One connection to a policy server.
pub struct RemoteSession {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    vocab_size: usize,
    /// Responses that arrived before they were waited on.
    pending: HashMap<u64, PolicyResponse>,
}

impl RemoteSession {
    /// Connects and performs the version/vocabulary handshake.
    pub fn connect(endpoint: &str, expected_vocab: usize, timeout: Duration) -> Result<Self> {
        let addrs: Vec<_> = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Protocol(format!("cannot resolve {endpoint}: {e}")))?
            .collect();
        let mut last = None;
        let mut stream = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = match (stream, last) {
            (Some(s), _) => s,
            (None, Some(e)) => return Err(io_error(e, &format!("connect to {endpoint}"))),
            (None, None) => return Err(Error::Protocol(format!("no address for {endpoint}"))),
        };
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        let mut session = Self {
            reader: BufReader::new(stream),
            writer,
            next_id: 1,
            vocab_size: expected_vocab,
            pending: HashMap::new(),
        };
        session.send(&Message::Hello {
            version: PROTOCOL_VERSION,
            vocab_size: expected_vocab,
        })?;
        match session.read_message()? {
            Message::Hello {
                version,
                vocab_size,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(Error::VersionMismatch {
                        client: PROTOCOL_VERSION,
                        server: version,
                    });
                }
                if vocab_size != expected_vocab {
                    return Err(Error::VocabularyMismatch {
                        student: expected_vocab,
                        teacher: vocab_size,
                    });
                }
            }
            Message::Error { message } => return Err(Error::Protocol(message)),
            other => return Err(Error::Protocol(format!("expected hello, got {other:?}"))),
        }
        Ok(session)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        self.writer
            .write_all(msg.to_line().as_bytes())
            .map_err(|e| io_error(e, "write"))
    }

    fn read_message(&mut self) -> Result<Message> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| io_error(e, "server response"))?;
        if n == 0 {
            return Err(Error::Protocol("connection closed by server".into()));
        }
        Message::parse(&line).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
    }

    /// Sends a request without waiting; returns its id.
    pub fn submit(&mut self, kind: RequestKind, context: &[TokenId], k: Option<usize>, seed: Option<u64>) -> Result<u64> {
        let request_id = self.next_id;
        self.next_id += 1;
        self.send(&Message::Request(PolicyRequest {
            request_id,
            kind,
            context: context.to_vec(),
            k,
            seed,
        }))?;
        Ok(request_id)
    }

    /// Waits for the response to `id`, stashing any other ids that arrive
    /// first.
    pub fn wait(&mut self, id: u64) -> Result<PolicyResponse> {
        if let Some(r) = self.pending.remove(&id) {
            return Ok(r);
        }
        loop {
            match self.read_message()? {
                Message::Response(r) => {
                    if r.payload_count() != 1 {
                        return Err(Error::Protocol(format!(
                            "response {} carries {} payload fields",
                            r.request_id,
                            r.payload_count()
                        )));
                    }
                    if r.request_id == id {
                        return Ok(r);
                    }
                    if r.request_id >= self.next_id {
                        return Err(Error::Protocol(format!(
                            "response for unknown request {}",
                            r.request_id
                        )));
                    }
                    self.pending.insert(r.request_id, r);
                }
                Message::Error { message } => return Err(Error::Protocol(message)),
                other => {
                    return Err(Error::Protocol(format!("unexpected message {other:?}")))
                }
            }
        }
    }

    fn check_error(r: &PolicyResponse) -> Result<()> {
        match &r.error {
            Some(message) => Err(Error::Remote {
                request_id: r.request_id,
                message: message.clone(),
            }),
            None => Ok(()),
        }
    }

    fn to_distribution(&self, r: PolicyResponse) -> Result<ConditionalDistribution> {
        Self::check_error(&r)?;
        let log_probs = r
            .log_probs
            .ok_or_else(|| Error::Protocol(format!("response {} lacks log_probs", r.request_id)))?;
        if log_probs.len() != self.vocab_size {
            return Err(Error::Protocol(format!(
                "expected {} log-probs, got {}",
                self.vocab_size,
                log_probs.len()
            )));
        }
        let mass: f64 = log_probs.iter().map(|l| l.exp()).sum();
        if !((mass - 1.0).abs() <= NORMALIZATION_TOL) {
            return Err(Error::NotNormalized { mass });
        }
        Ok(ConditionalDistribution {
            logits: log_probs.clone(),
            log_probs,
        })
    }

    pub fn query_logprobs(&mut self, context: &[TokenId]) -> Result<ConditionalDistribution> {
        let id = self.submit(RequestKind::Logprobs, context, None, None)?;
        let r = self.wait(id)?;
        self.to_distribution(r)
    }

    /// Pipelines up to [`PIPELINE_WINDOW`] requests at a time.
    pub fn query_logprobs_batch(
        &mut self,
        contexts: &[Vec<TokenId>],
    ) -> Result<Vec<ConditionalDistribution>> {
        let mut out = Vec::with_capacity(contexts.len());
        for chunk in contexts.chunks(PIPELINE_WINDOW) {
            let ids = chunk
                .iter()
                .map(|c| self.submit(RequestKind::Logprobs, c, None, None))
                .collect::<Result<Vec<_>>>()?;
            for id in ids {
                let r = self.wait(id)?;
                out.push(self.to_distribution(r)?);
            }
        }
        Ok(out)
    }

    pub fn query_topk(&mut self, context: &[TokenId], k: usize) -> Result<Vec<(TokenId, f64)>> {
        let id = self.submit(RequestKind::Topk, context, Some(k), None)?;
        let r = self.wait(id)?;
        Self::check_error(&r)?;
        r.topk_pairs
            .ok_or_else(|| Error::Protocol(format!("response {id} lacks topk_pairs")))
    }

    pub fn query_sample(&mut self, context: &[TokenId], seed: u64) -> Result<TokenId> {
        let id = self.submit(RequestKind::Sample, context, None, Some(seed))?;
        let r = self.wait(id)?;
        Self::check_error(&r)?;
        r.sampled
            .ok_or_else(|| Error::Protocol(format!("response {id} lacks sampled")))
    }
}

/// Builds a full distribution from top-k pairs, spreading the residual mass
/// uniformly over the remaining tokens and renormalizing.
pub fn topk_distribution(pairs: &[(TokenId, f64)], vocab_size: usize) -> Result<ConditionalDistribution> {
    let mut seen = vec![false; vocab_size];
    let mut mass = 0.0;
    for &(t, lp) in pairs {
        let slot = seen
            .get_mut(t as usize)
            .ok_or(Error::TokenOutOfRange { token: t, size: vocab_size })?;
        *slot = true;
        mass += lp.exp();
    }
    let rest = seen.iter().filter(|s| !**s).count();
    let filler = if rest > 0 {
        ((1.0 - mass).max(1e-12) / rest as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    let mut logits = vec![filler; vocab_size];
    for &(t, lp) in pairs {
        logits[t as usize] = lp;
    }
    Ok(ConditionalDistribution::from_logits(logits))
}

/// A teacher served by a remote process.
pub struct RemoteTeacher {
    session: Mutex<RemoteSession>,
    vocab: Vocabulary,
    topk: Option<usize>,
}

impl RemoteTeacher {
    pub fn connect(endpoint: &str, vocab: Vocabulary, timeout: Duration) -> Result<Self> {
        Ok(Self {
            session: Mutex::new(RemoteSession::connect(endpoint, vocab.size(), timeout)?),
            vocab,
            topk: None,
        })
    }

    /// Scores with top-k renormalized distributions instead of full vectors.
    pub fn with_topk(mut self, k: usize) -> Self {
        self.topk = Some(k);
        self
    }

    fn session(&self) -> std::sync::MutexGuard<'_, RemoteSession> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl TeacherPolicy for RemoteTeacher {
    fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    fn distribution(&self, ctx: Context<'_>) -> Result<ConditionalDistribution> {
        let mut s = self.session();
        match self.topk {
            Some(k) => topk_distribution(&s.query_topk(&ctx.to_vec(), k)?, self.vocab.size()),
            None => s.query_logprobs(&ctx.to_vec()),
        }
    }

    fn response_logprobs(&self, seq: &TokenSequence, from: usize) -> Result<Vec<f64>> {
        if self.topk.is_some() {
            return (from..seq.len())
                .map(|t| Ok(self.distribution(seq.context(t))?.log_prob(seq.response[t])))
                .collect();
        }
        let contexts: Vec<Vec<TokenId>> = (from..seq.len()).map(|t| seq.context(t).to_vec()).collect();
        let dists = self.session().query_logprobs_batch(&contexts)?;
        Ok(dists
            .iter()
            .zip(&seq.response[from..])
            .map(|(d, &tok)| d.log_prob(tok))
            .collect())
    }

    fn approximation(&self) -> Option<String> {
        self.topk.map(|k| format!("topk:{k}"))
    }
}
