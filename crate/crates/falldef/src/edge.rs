//! Streaming inference over TCP, plus a replay client.
//!
//! The wire protocol is newline-delimited JSON in both directions. Each
//! incoming line is one accelerometer sample:
//!
//! ```text
//! {"t":1.0,"ax":0.02,"ay":-0.98,"az":0.01}
//! ```
//!
//! and every line gets exactly one response:
//!
//! ```text
//! {"type":"ack","classified":false}
//! {"type":"ack","classified":true,"p_fall":0.0123}
//! {"type":"alert","p_fall":0.97,"window_start_t":12.3,"window_end_t":13.55,"emitted_at_unix":1724300000.1}
//! {"type":"error","message":"missing field \"az\""}
//! ```
//!
//! Each connection owns its own sliding buffer and cooldown clock; the model
//! is shared read-only. Alert decisions use event time (`t`), never the wall
//! clock, so a recording replayed at any speed produces the same alerts.
//! Every alert is appended to the local alert log before anything else
//! happens; webhook delivery runs on a separate thread behind a bounded
//! queue, and when that queue is full the webhook delivery is dropped — the
//! local log entry never is.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, Sample, Segment};
use crate::dgru::{load_model, predict_values, DgruModel, ModelError};

/// Alerts waiting for webhook delivery. Sample processing never blocks on
/// this queue; overflow drops the delivery and logs a warning.
const WEBHOOK_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{reason}")]
    Decode { reason: String },
    #[error("serve config invalid: {reason}")]
    Config { reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("webhook delivery to {url} failed after {attempts} attempts: {last_error}")]
    Webhook {
        url: String,
        attempts: u32,
        last_error: String,
    },
    #[error("protocol violation: {reason}")]
    Protocol { reason: String },
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> EdgeError {
    let context = context.into();
    move |source| EdgeError::Io { context, source }
}

// ---------------------------------------------------------------------------
// Wire types
// ---------------------------------------------------------------------------

/// One accelerometer sample on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

/// Parse one line into an event. Errors name the offending field so the
/// client can fix its sender; the connection is expected to stay open.
pub fn decode_event(line: &str) -> Result<StreamEvent, EdgeError> {
    let decode = |reason: String| EdgeError::Decode { reason };
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| decode(format!("record is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| decode("record must be a JSON object".into()))?;
    let field = |name: &str| -> Result<f64, EdgeError> {
        let raw = obj
            .get(name)
            .ok_or_else(|| decode(format!("missing field \"{name}\"")))?;
        let x = raw
            .as_f64()
            .ok_or_else(|| decode(format!("field \"{name}\" must be a number, got {raw}")))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(decode(format!("field \"{name}\" must be finite")))
        }
    };
    Ok(StreamEvent {
        t: field("t")?,
        ax: field("ax")?,
        ay: field("ay")?,
        az: field("az")?,
    })
}

/// A fall the service decided to announce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub p_fall: f64,
    /// Event time of the oldest sample in the triggering window.
    pub window_start_t: f64,
    /// Event time of the newest sample (the one that triggered).
    pub window_end_t: f64,
    /// Wall-clock seconds since the Unix epoch when the alert was emitted.
    /// Informational only — no decision depends on it.
    pub emitted_at_unix: f64,
}

/// One response line. Serializes with a `type` tag:
/// `{"type":"ack",…}`, `{"type":"alert",…}`, `{"type":"error",…}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Ack {
        classified: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_fall: Option<f64>,
    },
    Alert(AlertEvent),
    Error {
        message: String,
    },
}

// ---------------------------------------------------------------------------
// Session state
// ---------------------------------------------------------------------------

/// The most recent `capacity` samples with their event times.
#[derive(Debug, Clone)]
pub struct SlidingBuffer {
    capacity: usize,
    entries: std::collections::VecDeque<(f64, [f64; 3])>,
}

impl SlidingBuffer {
    pub fn new(capacity: usize) -> SlidingBuffer {
        SlidingBuffer {
            capacity,
            entries: std::collections::VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: f64, values: [f64; 3]) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, values));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// The full window as `(start_t, end_t, values oldest→newest)`, or
    /// `None` while still filling.
    pub fn window(&self) -> Option<(f64, f64, Vec<[f64; 3]>)> {
        if !self.is_full() || self.capacity == 0 {
            return None;
        }
        let start_t = self.entries.front().map(|(t, _)| *t)?;
        let end_t = self.entries.back().map(|(t, _)| *t)?;
        Some((start_t, end_t, self.entries.iter().map(|(_, v)| *v).collect()))
    }
}

/// Runtime knobs for the service. Bind address and model path live here too
/// so one value describes a deployable instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub bind_addr: String,
    pub model_path: PathBuf,
    /// Alert iff `p_fall >=` this. In (0, 1]; 1.0 can never fire because
    /// softmax outputs are strictly below one.
    pub alert_threshold: f64,
    /// Minimum event-time seconds between two alerts on one connection.
    pub cooldown_seconds: f64,
    /// Classify once per this many new samples once the buffer is warm.
    pub stride: usize,
    pub webhook_url: Option<String>,
    /// Total delivery attempts per alert.
    pub webhook_attempts: u32,
    /// Sleep before retry k (1-based) is `backoff * 2^(k-1)`.
    pub webhook_backoff: Duration,
    pub alert_log_path: PathBuf,
}

impl Default for ServeConfig {
    fn default() -> ServeConfig {
        ServeConfig {
            bind_addr: "127.0.0.1:7787".into(),
            model_path: PathBuf::from("model.json"),
            alert_threshold: 0.5,
            cooldown_seconds: 10.0,
            stride: 1,
            webhook_url: None,
            webhook_attempts: 3,
            webhook_backoff: Duration::from_millis(500),
            alert_log_path: PathBuf::from("falldef-alerts.log"),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<(), EdgeError> {
        let bad = |reason: String| Err(EdgeError::Config { reason });
        if !(self.alert_threshold > 0.0 && self.alert_threshold <= 1.0) {
            return bad(format!(
                "alert_threshold must be in (0, 1], got {}",
                self.alert_threshold
            ));
        }
        if !(self.cooldown_seconds >= 0.0 && self.cooldown_seconds.is_finite()) {
            return bad(format!(
                "cooldown must be a finite number of seconds >= 0, got {}",
                self.cooldown_seconds
            ));
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.webhook_attempts == 0 {
            return bad("webhook_attempts must be at least 1".into());
        }
        Ok(())
    }
}

/// What one incoming event produced.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Buffer not yet full; nothing to classify.
    Buffering,
    /// Buffer full but the stride says skip this sample.
    Skipped,
    /// Window classified, no alert (below threshold or inside cooldown).
    Classified { p_fall: f64 },
    /// Window classified and the alert fired.
    Alerted(AlertEvent),
}

/// Per-connection state: sliding buffer, stride counter, cooldown clock.
#[derive(Debug)]
pub struct Session {
    buffer: SlidingBuffer,
    samples_since_classify: usize,
    last_alert_t: Option<f64>,
    last_t: Option<f64>,
}

impl Session {
    pub fn new(window_size: usize) -> Session {
        Session {
            buffer: SlidingBuffer::new(window_size),
            samples_since_classify: 0,
            last_alert_t: None,
            last_t: None,
        }
    }

    /// Absorb one event. Classifies when the buffer is full and `stride`
    /// new samples have arrived since the last classification; alerts when
    /// `p_fall` clears the threshold and the cooldown (measured in event
    /// time) has elapsed. Out-of-order timestamps are logged and accepted.
    pub fn step(
        &mut self,
        model: &DgruModel,
        cfg: &ServeConfig,
        event: StreamEvent,
    ) -> Result<StepOutcome, EdgeError> {
        if let Some(last) = self.last_t {
            if event.t < last {
                log::warn!(
                    "event time went backwards ({last} -> {}); accepting the sample anyway",
                    event.t
                );
            }
        }
        self.last_t = Some(event.t);
        self.buffer.push(event.t, [event.ax, event.ay, event.az]);
        self.samples_since_classify = self.samples_since_classify.saturating_add(1);

        if !self.buffer.is_full() {
            return Ok(StepOutcome::Buffering);
        }
        if self.samples_since_classify < cfg.stride {
            return Ok(StepOutcome::Skipped);
        }
        let (window_start_t, window_end_t, values) = self
            .buffer
            .window()
            .expect("buffer reported full, window must exist");
        self.samples_since_classify = 0;

        let (_, p_fall) = predict_values(model, &values)?;
        let cooled_down = match self.last_alert_t {
            None => true,
            Some(last) => event.t - last >= cfg.cooldown_seconds,
        };
        if p_fall >= cfg.alert_threshold && cooled_down {
            self.last_alert_t = Some(event.t);
            Ok(StepOutcome::Alerted(AlertEvent {
                p_fall,
                window_start_t,
                window_end_t,
                emitted_at_unix: unix_now(),
            }))
        } else {
            Ok(StepOutcome::Classified { p_fall })
        }
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

// ---------------------------------------------------------------------------
// Webhook delivery
// ---------------------------------------------------------------------------

/// POST `body` to `url`, retrying with exponential backoff. Returns how many
/// requests were made on success.
pub fn dispatch_webhook(
    url: &str,
    body: &str,
    attempts: u32,
    backoff: Duration,
) -> Result<u32, EdgeError> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(10))
        .build();
    let mut last_error = String::from("no attempts made");
    for attempt in 1..=attempts {
        if attempt > 1 {
            std::thread::sleep(backoff * 2u32.saturating_pow(attempt - 2));
        }
        match agent
            .post(url)
            .set("content-type", "application/json")
            .send_string(body)
        {
            Ok(_) => return Ok(attempt),
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(EdgeError::Webhook {
        url: url.to_string(),
        attempts,
        last_error,
    })
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// A running service. Dropping it (or calling [`Server::shutdown`]) stops
/// the acceptor, severs live connections, and joins all worker threads.
pub struct Server {
    local_addr: SocketAddr,
    shutting_down: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    acceptor: Option<JoinHandle<()>>,
    webhook_worker: Option<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        // Wake the blocking accept() so it can observe the flag.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for conn in self.conns.lock().expect("conn registry poisoned").drain(..) {
            let _ = conn.shutdown(Shutdown::Both);
        }
        let handles: Vec<JoinHandle<()>> = self
            .handlers
            .lock()
            .expect("handler registry poisoned")
            .drain(..)
            .collect();
        for h in handles {
            let _ = h.join();
        }
        if let Some(h) = self.webhook_worker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Load the model, open the alert log, bind the socket, and start serving.
/// One thread per connection; the model is shared read-only.
pub fn run_server(cfg: &ServeConfig) -> Result<Server, EdgeError> {
    cfg.validate()?;
    let model = Arc::new(load_model(&cfg.model_path)?);
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cfg.alert_log_path)
        .map_err(io_ctx(format!(
            "open alert log {}",
            cfg.alert_log_path.display()
        )))?;
    let alert_log = Arc::new(Mutex::new(BufWriter::new(log_file)));
    let listener =
        TcpListener::bind(&cfg.bind_addr).map_err(io_ctx(format!("bind {}", cfg.bind_addr)))?;
    let local_addr = listener
        .local_addr()
        .map_err(io_ctx("read bound address"))?;

    let (webhook_tx, webhook_worker) = match cfg.webhook_url.clone() {
        Some(url) => {
            let (tx, rx) = sync_channel::<String>(WEBHOOK_QUEUE_CAPACITY);
            let attempts = cfg.webhook_attempts;
            let backoff = cfg.webhook_backoff;
            let worker = std::thread::spawn(move || {
                while let Ok(body) = rx.recv() {
                    match dispatch_webhook(&url, &body, attempts, backoff) {
                        Ok(requests) => log::debug!("webhook delivered after {requests} request(s)"),
                        Err(e) => log::error!("{e}"),
                    }
                }
            });
            (Some(tx), Some(worker))
        }
        None => (None, None),
    };

    let shutting_down = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));
    let handlers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));

    let acceptor = {
        let shutting_down = Arc::clone(&shutting_down);
        let conns = Arc::clone(&conns);
        let handlers = Arc::clone(&handlers);
        let session_cfg = Arc::new(cfg.clone());
        std::thread::spawn(move || {
            for incoming in listener.incoming() {
                if shutting_down.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match incoming {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                if let Ok(clone) = stream.try_clone() {
                    conns.lock().expect("conn registry poisoned").push(clone);
                }
                let model = Arc::clone(&model);
                let session_cfg = Arc::clone(&session_cfg);
                let alert_log = Arc::clone(&alert_log);
                let webhook_tx = webhook_tx.clone();
                let handle = std::thread::spawn(move || {
                    handle_connection(stream, &model, &session_cfg, &alert_log, webhook_tx)
                });
                handlers.lock().expect("handler registry poisoned").push(handle);
            }
        })
    };

    Ok(Server {
        local_addr,
        shutting_down,
        conns,
        handlers,
        acceptor: Some(acceptor),
        webhook_worker,
    })
}

fn handle_connection(
    stream: TcpStream,
    model: &DgruModel,
    cfg: &ServeConfig,
    alert_log: &Mutex<BufWriter<std::fs::File>>,
    webhook_tx: Option<SyncSender<String>>,
) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "<unknown>".into());
    // Lockstep request/response over small frames: without TCP_NODELAY,
    // Nagle holds each response back for the peer's delayed ACK (~40ms per
    // event), which is ruinous at sampling rates.
    if let Err(e) = stream.set_nodelay(true) {
        log::warn!("{peer}: cannot disable Nagle: {e}");
    }
    let reader = match stream.try_clone() {
        Ok(s) => BufReader::new(s),
        Err(e) => {
            log::warn!("{peer}: cannot clone stream: {e}");
            return;
        }
    };
    let mut writer = stream;
    let mut session = Session::new(model.window_size);

    let respond = |writer: &mut TcpStream, response: &Response| -> bool {
        let mut line = match serde_json::to_string(response) {
            Ok(l) => l,
            Err(e) => {
                log::error!("{peer}: cannot encode response: {e}");
                return false;
            }
        };
        line.push('\n');
        // One write, one segment: keeps the line atomic on the wire.
        writer.write_all(line.as_bytes()).is_ok()
    };

    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break, // client went away or sent non-text garbage
        };
        let response = match decode_event(&line) {
            Err(e) => Response::Error {
                message: e.to_string(),
            },
            Ok(event) => match session.step(model, cfg, event) {
                Ok(StepOutcome::Buffering) | Ok(StepOutcome::Skipped) => Response::Ack {
                    classified: false,
                    p_fall: None,
                },
                Ok(StepOutcome::Classified { p_fall }) => Response::Ack {
                    classified: true,
                    p_fall: Some(p_fall),
                },
                Ok(StepOutcome::Alerted(alert)) => {
                    record_alert(&alert, alert_log, webhook_tx.as_ref());
                    Response::Alert(alert)
                }
                Err(e) => {
                    // Inference failures end the connection with a diagnostic.
                    log::error!("{peer}: inference failed: {e}");
                    let _ = respond(
                        &mut writer,
                        &Response::Error {
                            message: format!("inference failed: {e}"),
                        },
                    );
                    return;
                }
            },
        };
        if !respond(&mut writer, &response) {
            break;
        }
    }
}

/// Durably record an alert. The local log write happens first and always;
/// webhook delivery is queued and may be dropped under pressure.
fn record_alert(
    alert: &AlertEvent,
    alert_log: &Mutex<BufWriter<std::fs::File>>,
    webhook_tx: Option<&SyncSender<String>>,
) {
    let body = match serde_json::to_string(alert) {
        Ok(b) => b,
        Err(e) => {
            log::error!("cannot encode alert: {e}");
            return;
        }
    };
    {
        let mut log_file = alert_log.lock().expect("alert log poisoned");
        if let Err(e) = writeln!(log_file, "{body}").and_then(|_| log_file.flush()) {
            log::error!("cannot write alert log: {e}");
        }
    }
    if let Some(tx) = webhook_tx {
        match tx.try_send(body) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => {
                log::warn!("webhook queue full; dropping delivery (alert is in the local log)");
            }
            Err(TrySendError::Disconnected(_)) => {
                log::warn!("webhook worker gone; alert is in the local log only");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Replay client
// ---------------------------------------------------------------------------

pub const DEFAULT_RATE_HZ: f64 = 31.25;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub addr: String,
    /// Sampling rate used to synthesize timestamps when the data has none,
    /// and to pace such data.
    pub rate_hz: f64,
    /// Pacing multiplier; `f64::INFINITY` disables sleeping entirely.
    pub speedup: f64,
}

impl Default for ReplayConfig {
    fn default() -> ReplayConfig {
        ReplayConfig {
            addr: "127.0.0.1:7787".into(),
            rate_hz: DEFAULT_RATE_HZ,
            speedup: 1.0,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<(), EdgeError> {
        let bad = |reason: String| Err(EdgeError::Config { reason });
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return bad(format!("rate_hz must be positive and finite, got {}", self.rate_hz));
        }
        if !(self.speedup > 0.0) {
            return bad(format!("speedup must be positive, got {}", self.speedup));
        }
        Ok(())
    }
}

/// What a replay run sent and got back.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplaySummary {
    pub segments: u64,
    pub events_sent: u64,
    /// Windows the server classified (acks with a probability, plus alerts).
    pub classifications: u64,
    pub alerts: Vec<AlertEvent>,
    pub error_responses: u64,
    /// Responses that were not valid protocol lines at all.
    pub protocol_errors: u64,
    /// Ground-truth fall regions found in the replayed data.
    pub fall_regions: u64,
    /// Regions at least one alert window overlapped.
    pub regions_with_alert: u64,
    /// Alerts whose window overlapped no ground-truth region.
    pub alerts_outside_regions: u64,
}

impl std::fmt::Display for ReplaySummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "segments replayed:      {}", self.segments)?;
        writeln!(f, "events sent:            {}", self.events_sent)?;
        writeln!(f, "windows classified:     {}", self.classifications)?;
        writeln!(f, "alerts received:        {}", self.alerts.len())?;
        writeln!(f, "error responses:        {}", self.error_responses)?;
        writeln!(f, "protocol errors:        {}", self.protocol_errors)?;
        writeln!(f, "fall regions (truth):   {}", self.fall_regions)?;
        writeln!(f, "regions with an alert:  {}", self.regions_with_alert)?;
        write!(f, "alerts outside regions: {}", self.alerts_outside_regions)
    }
}

/// Event time for replay and ground-truth bookkeeping: the recorded `t`
/// when present, otherwise `index / rate_hz`.
fn event_time(sample: &Sample, index: usize, rate_hz: f64) -> f64 {
    sample.t.unwrap_or(index as f64 / rate_hz)
}

/// Maximal runs of fall-labeled samples as closed event-time intervals.
/// Unlabeled samples break a run.
pub fn fall_regions(segment: &Segment, rate_hz: f64) -> Vec<(f64, f64)> {
    let mut regions = Vec::new();
    let mut current: Option<(f64, f64)> = None;
    for (i, sample) in segment.samples.iter().enumerate() {
        let t = event_time(sample, i, rate_hz);
        if sample.point_label == Some(Label::Fall) {
            current = Some(match current {
                None => (t, t),
                Some((start, _)) => (start, t),
            });
        } else if let Some(done) = current.take() {
            regions.push(done);
        }
    }
    if let Some(done) = current {
        regions.push(done);
    }
    regions
}

/// Match alert windows against ground-truth regions by interval overlap.
/// Returns `(regions with at least one alert, alerts touching no region)`.
pub fn count_region_hits(alerts: &[AlertEvent], regions: &[(f64, f64)]) -> (u64, u64) {
    let overlaps = |a: &AlertEvent, r: &(f64, f64)| a.window_start_t <= r.1 && a.window_end_t >= r.0;
    let hit = regions
        .iter()
        .filter(|r| alerts.iter().any(|a| overlaps(a, r)))
        .count() as u64;
    let outside = alerts
        .iter()
        .filter(|a| !regions.iter().any(|r| overlaps(a, r)))
        .count() as u64;
    (hit, outside)
}

/// Stream recorded segments to a running server, one connection per segment
/// (each recording deserves a fresh buffer), pacing sends by event-time gaps
/// divided by `speedup`. Responses are read in lockstep, one per event.
pub fn replay(segments: &[Segment], cfg: &ReplayConfig) -> Result<ReplaySummary, EdgeError> {
    cfg.validate()?;
    let mut summary = ReplaySummary::default();
    for segment in segments {
        let stream = TcpStream::connect(&cfg.addr)
            .map_err(io_ctx(format!("connect to {}", cfg.addr)))?;
        stream
            .set_nodelay(true)
            .map_err(io_ctx("configure replay connection"))?;
        let mut reader = BufReader::new(
            stream
                .try_clone()
                .map_err(io_ctx("clone replay connection"))?,
        );
        let mut writer = stream;

        let regions = fall_regions(segment, cfg.rate_hz);
        let mut segment_alerts: Vec<AlertEvent> = Vec::new();
        let mut prev_t: Option<f64> = None;

        for (i, sample) in segment.samples.iter().enumerate() {
            let t = event_time(sample, i, cfg.rate_hz);
            if let Some(prev) = prev_t {
                if cfg.speedup.is_finite() {
                    let gap = ((t - prev) / cfg.speedup).max(0.0);
                    if gap > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(gap));
                    }
                }
            }
            prev_t = Some(t);

            let event = StreamEvent {
                t,
                ax: sample.ax,
                ay: sample.ay,
                az: sample.az,
            };
            let mut line = serde_json::to_string(&event)
                .map_err(|e| EdgeError::Protocol { reason: format!("cannot encode event: {e}") })?;
            line.push('\n');
            writer
                .write_all(line.as_bytes())
                .map_err(io_ctx("send event"))?;
            summary.events_sent += 1;

            let mut response_line = String::new();
            let read = reader
                .read_line(&mut response_line)
                .map_err(io_ctx("read response"))?;
            if read == 0 {
                return Err(EdgeError::Protocol {
                    reason: "server closed the connection mid-stream".into(),
                });
            }
            match serde_json::from_str::<Response>(response_line.trim_end()) {
                Ok(Response::Ack { classified, .. }) => {
                    if classified {
                        summary.classifications += 1;
                    }
                }
                Ok(Response::Alert(alert)) => {
                    summary.classifications += 1;
                    segment_alerts.push(alert);
                }
                Ok(Response::Error { message }) => {
                    log::warn!("server rejected an event: {message}");
                    summary.error_responses += 1;
                }
                Err(e) => {
                    log::warn!("unparseable response {response_line:?}: {e}");
                    summary.protocol_errors += 1;
                }
            }
        }

        let (hit, outside) = count_region_hits(&segment_alerts, &regions);
        summary.segments += 1;
        summary.fall_regions += regions.len() as u64;
        summary.regions_with_alert += hit;
        summary.alerts_outside_regions += outside;
        summary.alerts.extend(segment_alerts);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgru::ModelConfig;
    use crate::numerics::Rng;

    fn tiny_model(window_size: usize) -> DgruModel {
        DgruModel::new(
            &ModelConfig {
                hidden_dim: 3,
                num_layers: 1,
                head_dim: 3,
                window_size,
            },
            &mut Rng::new(11),
        )
        .unwrap()
    }

    fn serve_cfg(threshold: f64, cooldown: f64, stride: usize) -> ServeConfig {
        ServeConfig {
            alert_threshold: threshold,
            cooldown_seconds: cooldown,
            stride,
            ..ServeConfig::default()
        }
    }

    fn event(t: f64, v: f64) -> StreamEvent {
        StreamEvent {
            t,
            ax: v,
            ay: -v,
            az: 0.5 * v,
        }
    }

    #[test]
    fn decode_parses_the_documented_example() {
        let e = decode_event(r#"{"t":1.0,"ax":0.02,"ay":-0.98,"az":0.01}"#).unwrap();
        assert_eq!(
            e,
            StreamEvent {
                t: 1.0,
                ax: 0.02,
                ay: -0.98,
                az: 0.01
            }
        );
        // Unknown extra fields are tolerated.
        let e = decode_event(r#"{"t":2.0,"ax":0.0,"ay":0.0,"az":1.0,"battery":0.8}"#).unwrap();
        assert_eq!(e.az, 1.0);
    }

    #[test]
    fn decode_errors_name_the_offending_field() {
        let err = decode_event(r#"{"t":1.0,"ax":0.02,"ay":-0.98}"#).unwrap_err();
        assert!(err.to_string().contains("\"az\""), "{err}");

        let err = decode_event(r#"{"t":1.0,"ax":"oops","ay":0.0,"az":0.0}"#).unwrap_err();
        assert!(err.to_string().contains("\"ax\""), "{err}");

        // JSON cannot express non-finite numbers; out-of-range literals are
        // rejected by the parser before the per-field finite check.
        let err = decode_event(r#"{"t":1e999,"ax":0.0,"ay":0.0,"az":0.0}"#).unwrap_err();
        assert!(matches!(err, EdgeError::Decode { .. }), "{err}");

        let err = decode_event("not json at all").unwrap_err();
        assert!(err.to_string().contains("JSON"), "{err}");

        let err = decode_event("[1,2,3]").unwrap_err();
        assert!(err.to_string().contains("object"), "{err}");
    }

    #[test]
    fn buffer_keeps_only_the_newest_window() {
        let mut buf = SlidingBuffer::new(4);
        assert!(buf.window().is_none());
        for i in 0..9 {
            buf.push(i as f64, [i as f64, 0.0, 0.0]);
        }
        assert_eq!(buf.len(), 4);
        let (start_t, end_t, values) = buf.window().unwrap();
        assert_eq!(start_t, 5.0);
        assert_eq!(end_t, 8.0);
        assert_eq!(values[0][0], 5.0);
        assert_eq!(values[3][0], 8.0);
    }

    #[test]
    fn no_classification_until_the_window_fills() {
        let model = tiny_model(5);
        let cfg = serve_cfg(0.5, 10.0, 1);
        let mut session = Session::new(model.window_size);
        for i in 0..4 {
            let out = session.step(&model, &cfg, event(i as f64, 0.1)).unwrap();
            assert_eq!(out, StepOutcome::Buffering, "event {i} must only buffer");
        }
        let out = session.step(&model, &cfg, event(4.0, 0.1)).unwrap();
        assert!(
            matches!(out, StepOutcome::Classified { .. } | StepOutcome::Alerted(_)),
            "the fifth event must classify, got {out:?}"
        );
    }

    #[test]
    fn serve_path_matches_offline_predict_bitwise() {
        let model = tiny_model(5);
        let cfg = serve_cfg(1.0, 0.0, 1); // threshold 1.0: alerts impossible
        let mut session = Session::new(model.window_size);
        let samples: Vec<StreamEvent> = (0..12).map(|i| event(i as f64, 0.3 * (i as f64).sin())).collect();

        for (i, &e) in samples.iter().enumerate() {
            let out = session.step(&model, &cfg, e).unwrap();
            if i < 4 {
                continue;
            }
            let window: Vec<[f64; 3]> = samples[i - 4..=i]
                .iter()
                .map(|s| [s.ax, s.ay, s.az])
                .collect();
            let (_, offline) = predict_values(&model, &window).unwrap();
            match out {
                StepOutcome::Classified { p_fall } => {
                    assert_eq!(
                        p_fall.to_bits(),
                        offline.to_bits(),
                        "event {i}: serve path diverged from offline predict"
                    );
                }
                other => panic!("event {i}: unexpected outcome {other:?}"),
            }
        }
    }

    #[test]
    fn stride_spaces_out_classifications() {
        let model = tiny_model(5);
        let cfg = serve_cfg(1.0, 0.0, 3);
        let mut session = Session::new(model.window_size);
        let mut classified_at = Vec::new();
        for i in 0..12 {
            match session.step(&model, &cfg, event(i as f64, 0.2)).unwrap() {
                StepOutcome::Classified { .. } => classified_at.push(i),
                StepOutcome::Alerted(_) => panic!("threshold 1.0 cannot alert"),
                StepOutcome::Buffering | StepOutcome::Skipped => {}
            }
        }
        // Window fills at event index 4; afterwards every third sample.
        assert_eq!(classified_at, vec![4, 7, 10]);
    }

    #[test]
    fn cooldown_debounces_in_event_time() {
        let model = tiny_model(5);
        // Minimum positive threshold: every classified window alerts unless
        // the cooldown suppresses it.
        let cfg = serve_cfg(f64::MIN_POSITIVE, 3.0, 1);
        let mut session = Session::new(model.window_size);
        let mut alert_times = Vec::new();
        for i in 0..20 {
            let t = i as f64; // one sample per second
            if let StepOutcome::Alerted(a) = session.step(&model, &cfg, event(t, 0.4)).unwrap() {
                assert_eq!(a.window_end_t, t);
                assert!(a.p_fall >= cfg.alert_threshold);
                alert_times.push(t);
            }
        }
        // First full window at t=4, then one alert per 3 event-seconds.
        assert_eq!(alert_times, vec![4.0, 7.0, 10.0, 13.0, 16.0, 19.0]);
        for pair in alert_times.windows(2) {
            assert!(pair[1] - pair[0] >= cfg.cooldown_seconds);
        }
    }

    #[test]
    fn threshold_one_never_alerts() {
        let model = tiny_model(5);
        let cfg = serve_cfg(1.0, 0.0, 1);
        let mut session = Session::new(model.window_size);
        let mut rng = Rng::new(99);
        for i in 0..200 {
            let e = StreamEvent {
                t: i as f64 * 0.032,
                ax: rng.uniform(-20.0, 20.0),
                ay: rng.uniform(-20.0, 20.0),
                az: rng.uniform(-20.0, 20.0),
            };
            let out = session.step(&model, &cfg, e).unwrap();
            assert!(
                !matches!(out, StepOutcome::Alerted(_)),
                "softmax output reached 1.0 at event {i}"
            );
        }
    }

    #[test]
    fn backwards_timestamps_are_accepted() {
        let model = tiny_model(5);
        let cfg = serve_cfg(0.5, 10.0, 1);
        let mut session = Session::new(model.window_size);
        session.step(&model, &cfg, event(5.0, 0.1)).unwrap();
        let out = session.step(&model, &cfg, event(3.0, 0.1)).unwrap();
        assert_eq!(out, StepOutcome::Buffering, "regression in time must not drop the sample");
    }

    #[test]
    fn serve_config_rejects_bad_values() {
        assert!(serve_cfg(0.0, 10.0, 1).validate().is_err());
        assert!(serve_cfg(1.5, 10.0, 1).validate().is_err());
        assert!(serve_cfg(0.5, -1.0, 1).validate().is_err());
        assert!(serve_cfg(0.5, f64::NAN, 1).validate().is_err());
        assert!(serve_cfg(0.5, 10.0, 0).validate().is_err());
        assert!(serve_cfg(1.0, 0.0, 1).validate().is_ok());
        let mut cfg = serve_cfg(0.5, 10.0, 1);
        cfg.webhook_attempts = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn response_lines_match_the_documented_shapes() {
        let ack = Response::Ack {
            classified: false,
            p_fall: None,
        };
        assert_eq!(
            serde_json::to_string(&ack).unwrap(),
            r#"{"type":"ack","classified":false}"#
        );
        let ack = Response::Ack {
            classified: true,
            p_fall: Some(0.25),
        };
        assert_eq!(
            serde_json::to_string(&ack).unwrap(),
            r#"{"type":"ack","classified":true,"p_fall":0.25}"#
        );
        let alert = Response::Alert(AlertEvent {
            p_fall: 0.75,
            window_start_t: 1.0,
            window_end_t: 2.25,
            emitted_at_unix: 0.0,
        });
        assert_eq!(
            serde_json::to_string(&alert).unwrap(),
            r#"{"type":"alert","p_fall":0.75,"window_start_t":1.0,"window_end_t":2.25,"emitted_at_unix":0.0}"#
        );
        let err = Response::Error {
            message: "missing field \"az\"".into(),
        };
        assert_eq!(
            serde_json::to_string(&err).unwrap(),
            r#"{"type":"error","message":"missing field \"az\""}"#
        );

        // And they parse back.
        for line in [
            r#"{"type":"ack","classified":false}"#,
            r#"{"type":"ack","classified":true,"p_fall":0.25}"#,
            r#"{"type":"alert","p_fall":0.75,"window_start_t":1.0,"window_end_t":2.25,"emitted_at_unix":0.0}"#,
            r#"{"type":"error","message":"x"}"#,
        ] {
            serde_json::from_str::<Response>(line).unwrap();
        }
    }

    fn labeled_sample(t: Option<f64>, label: Option<Label>) -> Sample {
        Sample {
            t,
            ax: 0.0,
            ay: 0.0,
            az: 1.0,
            point_label: label,
        }
    }

    #[test]
    fn fall_regions_found_with_and_without_timestamps() {
        // Two bursts with explicit times.
        let segment = Segment {
            segment_id: "s".into(),
            samples: vec![
                labeled_sample(Some(0.0), Some(Label::NonFall)),
                labeled_sample(Some(1.0), Some(Label::Fall)),
                labeled_sample(Some(2.0), Some(Label::Fall)),
                labeled_sample(Some(3.0), Some(Label::NonFall)),
                labeled_sample(Some(4.0), None), // unlabeled breaks runs
                labeled_sample(Some(5.0), Some(Label::Fall)),
            ],
        };
        assert_eq!(fall_regions(&segment, 31.25), vec![(1.0, 2.0), (5.0, 5.0)]);

        // No timestamps: synthesized from the index and rate.
        let segment = Segment {
            segment_id: "s".into(),
            samples: vec![
                labeled_sample(None, Some(Label::NonFall)),
                labeled_sample(None, Some(Label::Fall)),
                labeled_sample(None, Some(Label::Fall)),
            ],
        };
        assert_eq!(fall_regions(&segment, 2.0), vec![(0.5, 1.0)]);

        // All non-fall: nothing.
        let segment = Segment {
            segment_id: "s".into(),
            samples: vec![labeled_sample(None, Some(Label::NonFall)); 5],
        };
        assert!(fall_regions(&segment, 2.0).is_empty());
    }

    #[test]
    fn region_matching_counts_hits_and_strays() {
        let alert = |start: f64, end: f64| AlertEvent {
            p_fall: 0.9,
            window_start_t: start,
            window_end_t: end,
            emitted_at_unix: 0.0,
        };
        let regions = vec![(10.0, 12.0), (30.0, 31.0)];
        // One alert overlapping the first region, one stray.
        let alerts = vec![alert(11.5, 13.0), alert(20.0, 21.0)];
        assert_eq!(count_region_hits(&alerts, &regions), (1, 1));
        // Touching the boundary counts as overlap.
        let alerts = vec![alert(12.0, 14.0), alert(28.0, 30.0)];
        assert_eq!(count_region_hits(&alerts, &regions), (2, 0));
        // No alerts.
        assert_eq!(count_region_hits(&[], &regions), (0, 0));
        // No regions: every alert is a stray.
        let alerts = vec![alert(1.0, 2.0)];
        assert_eq!(count_region_hits(&alerts, &[]), (0, 1));
    }

    #[test]
    fn replay_config_rejects_bad_values() {
        let mut cfg = ReplayConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.speedup = f64::INFINITY; // explicitly allowed: no pacing
        assert!(cfg.validate().is_ok());
        cfg.speedup = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ReplayConfig::default();
        cfg.rate_hz = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ReplayConfig::default();
        cfg.rate_hz = f64::INFINITY;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn alert_event_round_trips_through_json() {
        let alert = AlertEvent {
            p_fall: 0.987654321,
            window_start_t: 100.25,
            window_end_t: 101.5,
            emitted_at_unix: 1724300000.125,
        };
        let text = serde_json::to_string(&alert).unwrap();
        let back: AlertEvent = serde_json::from_str(&text).unwrap();
        assert_eq!(back, alert);
    }
}
