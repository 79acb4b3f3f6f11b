//! Live-socket tests for the inference service: protocol shapes, buffer
//! warm-up arithmetic, connection isolation, webhook retries, and crash
//! resilience. Each test runs its own server on an ephemeral port.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use falldef::dgru::{save_model, DgruModel, ModelConfig};
use falldef::edge::{replay, run_server, ReplayConfig, ServeConfig, Server};
use falldef::numerics::Rng;

const WINDOW: usize = 5;

/// A small untrained model: probabilities hover near 0.5, which is exactly
/// what these protocol tests need (thresholds of ~0 or 1 make alerting
/// fully predictable without training).
fn write_tiny_model(path: &Path) {
    let config = ModelConfig {
        hidden_dim: 4,
        num_layers: 1,
        head_dim: 4,
        window_size: WINDOW,
    };
    let model = DgruModel::new(&config, &mut Rng::new(3)).unwrap();
    save_model(&model, path).unwrap();
}

fn serve(dir: &Path, threshold: f64, cooldown: f64, webhook: Option<String>) -> Server {
    serve_with(dir, threshold, cooldown, webhook, Duration::from_millis(5))
}

fn serve_with(
    dir: &Path,
    threshold: f64,
    cooldown: f64,
    webhook: Option<String>,
    backoff: Duration,
) -> Server {
    let model_path = dir.join("model.json");
    if !model_path.exists() {
        write_tiny_model(&model_path);
    }
    let cfg = ServeConfig {
        bind_addr: "127.0.0.1:0".to_string(),
        model_path,
        alert_threshold: threshold,
        cooldown_seconds: cooldown,
        stride: 1,
        webhook_url: webhook,
        webhook_attempts: 3,
        webhook_backoff: backoff,
        alert_log_path: dir.join("alerts.log"),
    };
    run_server(&cfg).unwrap()
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Client {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_nodelay(true).unwrap();
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .unwrap();
        Client {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn send_raw(&mut self, line: &str) -> serde_json::Value {
        writeln!(self.writer, "{line}").unwrap();
        self.writer.flush().unwrap();
        let mut response = String::new();
        let n = self.reader.read_line(&mut response).unwrap();
        assert!(n > 0, "server closed the connection");
        serde_json::from_str(&response).unwrap()
    }

    fn send_event(&mut self, t: f64, ax: f64, ay: f64, az: f64) -> serde_json::Value {
        self.send_raw(&format!(r#"{{"t":{t},"ax":{ax},"ay":{ay},"az":{az}}}"#))
    }
}

#[test]
fn classifications_start_when_the_window_fills() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 10.0, None);
    let mut client = Client::connect(server.local_addr());

    let total = 12;
    let mut classified = 0;
    for i in 0..total {
        let response = client.send_event(i as f64 / 31.25, 0.1, -0.1, 9.8);
        assert_eq!(response["type"], "ack", "event {i}: {response}");
        let was_classified = response["classified"].as_bool().unwrap();
        assert_eq!(was_classified, i + 1 >= WINDOW, "event {i}");
        if was_classified {
            classified += 1;
            let p = response["p_fall"].as_f64().unwrap();
            assert!(p > 0.0 && p < 1.0, "probability in the open interval: {p}");
        } else {
            assert!(response.get("p_fall").is_none(), "no probability while buffering");
        }
    }
    assert_eq!(classified, total - (WINDOW - 1), "N - W + 1 classifications");
}

#[test]
fn malformed_lines_get_errors_and_the_stream_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 10.0, None);
    let mut client = Client::connect(server.local_addr());

    let bad = client.send_raw("this is not json");
    assert_eq!(bad["type"], "error");
    assert!(bad["message"].as_str().unwrap().contains("JSON"), "{bad}");

    let missing = client.send_raw(r#"{"t":0.1,"ax":1.0,"ay":2.0}"#);
    assert_eq!(missing["type"], "error");
    assert!(missing["message"].as_str().unwrap().contains("az"), "{missing}");

    let wrong_type = client.send_raw(r#"{"t":0.2,"ax":"high","ay":0.0,"az":9.8}"#);
    assert_eq!(wrong_type["type"], "error");
    assert!(wrong_type["message"].as_str().unwrap().contains("ax"), "{wrong_type}");

    // Malformed lines do not feed the buffer: five good events still warm up
    // from zero, and only the fifth classifies.
    for i in 0..WINDOW {
        let response = client.send_event(1.0 + i as f64, 0.0, 0.0, 9.8);
        assert_eq!(response["type"], "ack");
        assert_eq!(
            response["classified"].as_bool().unwrap(),
            i + 1 == WINDOW,
            "event {i} after errors"
        );
    }
}

#[test]
fn connections_have_independent_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 10.0, None);
    let mut first = Client::connect(server.local_addr());
    let mut second = Client::connect(server.local_addr());

    // Warm the first connection fully, interleaved with a cold second one.
    for i in 0..WINDOW {
        let r1 = first.send_event(i as f64, 0.2, 0.0, 9.8);
        assert_eq!(r1["classified"].as_bool().unwrap(), i + 1 == WINDOW);
        let r2 = second.send_event(i as f64, 0.0, 0.3, 9.7);
        assert_eq!(r2["classified"].as_bool().unwrap(), i + 1 == WINDOW);
    }
    // One more on the first: still classified; the second's state is its own.
    let r1 = first.send_event(WINDOW as f64, 0.2, 0.0, 9.8);
    assert!(r1["classified"].as_bool().unwrap());
}

#[test]
fn alerts_hit_the_local_log_and_the_webhook_retries_until_success() {
    // A stub HTTP endpoint that fails twice before accepting.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let hook_addr = listener.local_addr().unwrap();
    let bodies: Arc<Mutex<Vec<String>>> = Arc::new(Mutex::new(Vec::new()));
    let seen = bodies.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = match stream {
                Ok(s) => s,
                Err(_) => break,
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            let mut content_length = 0usize;
            // Request line + headers.
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let header = line.trim();
                if header.is_empty() {
                    break;
                }
                if let Some(v) = header.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; content_length];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let status = if i < 2 {
                "HTTP/1.1 500 Internal Server Error"
            } else {
                "HTTP/1.1 200 OK"
            };
            let _ = write!(stream, "{status}\r\ncontent-length: 0\r\nconnection: close\r\n\r\n");
        }
    });

    let dir = tempfile::tempdir().unwrap();
    // Threshold just above zero: the first full window always alerts; an
    // enormous cooldown keeps it to exactly one.
    let server = serve(
        dir.path(),
        f64::MIN_POSITIVE,
        1e9,
        Some(format!("http://{hook_addr}/alerts")),
    );
    let mut client = Client::connect(server.local_addr());

    let mut alert: Option<serde_json::Value> = None;
    for i in 0..WINDOW + 3 {
        let response = client.send_event(i as f64 / 31.25, 0.1, 0.2, 9.8);
        if response["type"] == "alert" {
            assert!(alert.is_none(), "cooldown allows only one alert");
            alert = Some(response);
        }
    }
    let alert = alert.expect("one alert fired");
    assert_eq!(alert["window_start_t"].as_f64().unwrap(), 0.0);
    let expected_end = (WINDOW - 1) as f64 / 31.25;
    assert!((alert["window_end_t"].as_f64().unwrap() - expected_end).abs() < 1e-12);

    // The local log is written immediately.
    let log_text = std::fs::read_to_string(dir.path().join("alerts.log")).unwrap();
    let logged: serde_json::Value = serde_json::from_str(log_text.lines().next().unwrap()).unwrap();
    assert_eq!(logged["p_fall"], alert["p_fall"]);

    // The webhook worker retried through both failures: same body, 3 posts.
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let count = bodies.lock().unwrap().len();
        if count >= 3 || Instant::now() > deadline {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let bodies = bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3, "two failures then a success");
    assert!(bodies.iter().all(|b| b == &bodies[0]), "identical delivery body");
    let delivered: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(delivered["p_fall"], alert["p_fall"]);
}

#[test]
fn threshold_one_never_alerts_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 0.0, None);
    let mut client = Client::connect(server.local_addr());

    let mut rng = Rng::new(17);
    for i in 0..60 {
        // Wild spikes included: probabilities stay strictly below 1.
        let magnitude = if i % 10 < 3 { 40.0 } else { 0.3 };
        let response = client.send_event(
            i as f64 / 31.25,
            rng.uniform(-magnitude, magnitude),
            rng.uniform(-magnitude, magnitude),
            9.8 + rng.uniform(-magnitude, magnitude),
        );
        assert_eq!(response["type"], "ack", "event {i}: {response}");
    }
    assert!(
        !dir.path().join("alerts.log").exists()
            || std::fs::read_to_string(dir.path().join("alerts.log")).unwrap().is_empty(),
        "no alerts logged at threshold 1.0"
    );
}

#[test]
fn abrupt_disconnects_leave_the_server_healthy() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 10.0, None);

    // Half-written line, then a hard drop.
    {
        let mut stream = TcpStream::connect(server.local_addr()).unwrap();
        stream.write_all(b"{\"t\":0.0,\"ax\":1.0").unwrap();
        stream.flush().unwrap();
    }
    // A clean disconnect right after connecting.
    drop(TcpStream::connect(server.local_addr()).unwrap());

    // The server still serves new clients.
    let mut client = Client::connect(server.local_addr());
    for i in 0..WINDOW {
        let response = client.send_event(i as f64, 0.0, 0.0, 9.8);
        assert_eq!(response["type"], "ack");
    }
}

#[test]
fn stop_closes_the_listener_and_connections() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(dir.path(), 1.0, 10.0, None);
    let addr = server.local_addr();
    let mut client = Client::connect(addr);
    let response = client.send_event(0.0, 0.1, 0.1, 9.8);
    assert_eq!(response["type"], "ack");

    server.shutdown();

    // Existing connections are shut down...
    let mut line = String::new();
    let n = client.reader.read_line(&mut line).unwrap_or(0);
    assert_eq!(n, 0, "connection closed by the server");
    // ...and nothing new is accepted.
    let refused = TcpStream::connect_timeout(&addr, Duration::from_millis(500));
    assert!(refused.is_err(), "listener is gone");
}

#[test]
fn replay_paces_in_event_time_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    // Threshold ~0: the first window of each connection alerts, giving the
    // summary something to count without a trained model.
    let server = serve(dir.path(), f64::MIN_POSITIVE, 1e9, None);

    let spec = common::CorpusSpec {
        lead_in: 30,
        bursts: 0,
        tail: 0,
        ..common::CorpusSpec::adl_only(31)
    };
    let segment = common::generate(&spec);
    let events = segment.samples.len();

    let cfg = ReplayConfig {
        addr: server.local_addr().to_string(),
        rate_hz: common::RATE_HZ,
        speedup: f64::INFINITY,
    };
    let summary = replay(std::slice::from_ref(&segment), &cfg).unwrap();
    assert_eq!(summary.segments, 1);
    assert_eq!(summary.events_sent, events as u64);
    assert_eq!(summary.classifications, (events - (WINDOW - 1)) as u64);
    assert_eq!(summary.alerts.len(), 1, "first window alerts, cooldown holds the rest");
    assert_eq!(summary.error_responses, 0);
    assert_eq!(summary.protocol_errors, 0);
    assert_eq!(summary.fall_regions, 0);
    assert_eq!(summary.alerts_outside_regions, 1, "no labeled fall to attribute it to");

    // Finite pacing actually slows the stream down: 30 samples at 31.25 Hz
    // sped up 4x is ~0.23 s of sleeping.
    let start = Instant::now();
    let cfg = ReplayConfig {
        speedup: 4.0,
        ..cfg
    };
    let _ = replay(std::slice::from_ref(&segment), &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let event_span = (events - 1) as f64 / common::RATE_HZ;
    assert!(
        elapsed >= event_span / 4.0 * 0.8,
        "paced replay finished too fast: {elapsed:.3}s for {event_span:.3}s of data"
    );
}
