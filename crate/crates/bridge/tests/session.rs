use std::path::PathBuf;
use std::time::Duration;

use cotrain_bridge::{serve, BridgeConfig, BridgeError, BridgeHandle};
use cotrain_core::harness::StepRecord;
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

const WAIT: Duration = Duration::from_secs(10);

struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    async fn connect(bridge: &BridgeHandle) -> Client {
        let (ws, _) = connect_async(format!("ws://{}/ws", bridge.local_addr())).await.unwrap();
        let mut c = Client { ws };
        let hello = c.next().await;
        assert_eq!(hello["type"], "state");
        c
    }

    async fn send(&mut self, msg: Value) {
        self.ws.send(Message::Text(msg.to_string().into())).await.unwrap();
    }

    async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::Text(text.into())).await.unwrap();
    }

    async fn next(&mut self) -> Value {
        loop {
            let msg = tokio::time::timeout(WAIT, self.ws.next()).await.expect("timed out").unwrap().unwrap();
            if let Message::Text(t) = msg {
                let v: Value = serde_json::from_str(t.as_str()).unwrap();
                assert_eq!(v["v"], 1);
                return v;
            }
        }
    }

    /// Reads until a message satisfies `pred`, returning it and the telemetry frames seen on the way.
    async fn until(&mut self, pred: impl Fn(&Value) -> bool) -> (Value, Vec<Value>) {
        let mut frames = Vec::new();
        loop {
            let v = self.next().await;
            if pred(&v) {
                return (v, frames);
            }
            if v["type"] == "telemetry" {
                frames.push(v);
            }
        }
    }

    async fn phase(&mut self, phase: &str) -> (Value, Vec<Value>) {
        self.until(|v| v["type"] == "state" && v["phase"] == phase).await
    }

    async fn error(&mut self) -> Value {
        self.until(|v| v["type"] == "error").await.0
    }

    async fn frame(&mut self) -> Value {
        self.until(|v| v["type"] == "telemetry").await.0
    }

    async fn start(&mut self, config: Value) {
        self.send(json!({"v": 1, "type": "control", "action": "start", "config": config})).await;
        self.phase("running").await;
    }

    async fn control(&mut self, action: &str) {
        self.send(json!({"v": 1, "type": "control", "action": action})).await;
    }

    async fn press(&mut self, value: f64) {
        self.send(json!({"v": 1, "type": "feedback", "value": value})).await;
    }
}

async fn bridge(period_ms: u64, log_dir: Option<PathBuf>) -> BridgeHandle {
    let cfg = BridgeConfig { step_period: Duration::from_millis(period_ms), log_dir, ..Default::default() };
    serve(cfg, "127.0.0.1:0").await.unwrap()
}

fn live(mode: &str, max_steps: u64) -> Value {
    json!({"mode": mode, "max_steps": max_steps, "feedback": {"kind": "live"}})
}

fn read_log(path: &Value) -> Vec<StepRecord> {
    let text = std::fs::read_to_string(path.as_str().unwrap()).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

async fn http_get(bridge: &BridgeHandle, path: &str) -> (String, Value) {
    let mut stream = TcpStream::connect(bridge.local_addr()).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    let (head, body) = buf.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), serde_json::from_str(body).unwrap())
}

fn t(v: &Value) -> u64 {
    v["t"].as_u64().unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn start_moves_idle_to_running_and_frames_flow() {
    let b = bridge(5, None).await;
    assert_eq!(b.state().phase, cotrain_bridge::Phase::Idle);
    let mut c = Client::connect(&b).await;
    c.start(live("fixed_plus_human", 100_000)).await;
    let mut last = None;
    for _ in 0..20 {
        let f = c.frame().await;
        for key in ["theta", "theta_t", "mu", "sigma", "a_exec", "r", "cumulative_reward", "s_emg"] {
            assert!(f[key].is_f64(), "{key} missing from {f}");
        }
        assert!(f["r_components"]["env"].is_f64());
        assert!(f["r_components"]["human"].is_f64());
        if let Some(prev) = last {
            assert!(t(&f) > prev);
        }
        last = Some(t(&f));
    }
    c.control("stop").await;
    c.phase("finished").await;
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn press_reaches_the_next_step_and_the_log() {
    let dir = tempfile::tempdir().unwrap();
    // A slowed loop leaves a wide window between frames.
    let b = bridge(50, Some(dir.path().to_path_buf())).await;
    let mut c = Client::connect(&b).await;
    c.start(live("human_only", 100_000)).await;
    let mut seen = c.frame().await;
    while t(&seen) < 5 {
        seen = c.frame().await;
    }
    assert_eq!(seen["r_components"]["human"], 0.0);
    c.press(1.0).await;
    let next = c.frame().await;
    assert!(t(&next) <= t(&seen) + 2, "press not applied promptly");
    assert!(next["r_components"]["human"].as_f64().unwrap() >= 1.0, "{next}");
    assert!(next["r_components"]["env"].is_null());
    assert_eq!(next["feedback"], json!([{"step": t(&next), "value": 1.0}]));

    c.control("stop").await;
    let (state, _) = c.phase("finished").await;
    let log = read_log(&state["log_path"]);
    let applied: Vec<&StepRecord> = log.iter().filter(|r| !r.feedback.is_empty()).collect();
    assert_eq!(applied.len(), 1);
    assert_eq!(applied[0].t, t(&next));
    assert_eq!(applied[0].feedback, vec![1.0]);
    assert!(applied[0].r_human.unwrap() >= 1.0);
    assert!(log.windows(2).all(|w| w[1].t == w[0].t + 1));
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn presses_within_one_step_are_summed() {
    let b = bridge(200, None).await;
    let mut c = Client::connect(&b).await;
    c.start(live("human_only", 100_000)).await;
    let seen = c.frame().await;
    for _ in 0..3 {
        c.press(1.0).await;
    }
    let next = c.frame().await;
    assert_eq!(t(&next), t(&seen) + 1);
    let applied = next["feedback"].as_array().unwrap();
    assert_eq!(applied.len(), 3);
    assert!(applied.iter().all(|p| p["step"] == next["t"]));
    assert!(next["r_components"]["human"].as_f64().unwrap() >= 3.0);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn paused_session_rejects_presses() {
    let dir = tempfile::tempdir().unwrap();
    let b = bridge(5, Some(dir.path().to_path_buf())).await;
    let mut c = Client::connect(&b).await;
    c.start(live("human_only", 100_000)).await;
    c.frame().await;
    c.control("pause").await;
    let (_, before) = c.phase("paused").await;
    c.press(1.0).await;
    let err = c.error().await;
    assert_eq!(err["code"], "not_running");
    assert_eq!(err["text"], "not running");

    c.control("resume").await;
    let (_, during) = c.phase("running").await;
    assert!(during.is_empty(), "frames emitted while paused");
    let after = c.frame().await;
    let last_before = before.last().map(t).unwrap_or(0);
    assert!(t(&after) > last_before);

    c.control("stop").await;
    let (state, _) = c.phase("finished").await;
    assert!(read_log(&state["log_path"]).iter().all(|r| r.feedback.is_empty()));
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_messages_get_errors_and_keep_the_connection() {
    let b = bridge(5, None).await;
    let mut c = Client::connect(&b).await;
    c.start(live("human_only", 100_000)).await;

    c.press(0.7).await;
    assert_eq!(c.error().await["code"], "illegal_feedback");
    c.send_raw("{not json").await;
    assert_eq!(c.error().await["code"], "malformed");
    c.send(json!({"v": 9, "type": "feedback", "value": 1})).await;
    assert_eq!(c.error().await["code"], "unsupported_version");
    c.send(json!({"v": 1, "type": "error", "code": "lagged", "text": "x"})).await;
    assert_eq!(c.error().await["code"], "unexpected_type");
    c.ws.send(Message::Binary(vec![1, 2, 3].into())).await.unwrap();
    assert_eq!(c.error().await["code"], "malformed");
    c.control("resume").await;
    assert_eq!(c.error().await["code"], "invalid_transition");
    c.send(json!({"v": 1, "type": "emg_sample", "s_raw": 0.4})).await;
    assert_eq!(c.error().await["code"], "emg_not_live");

    // still connected and served
    c.press(-0.5).await;
    let f = c.until(|v| v["type"] == "telemetry" && !v["feedback"].as_array().unwrap().is_empty()).await.0;
    assert_eq!(f["feedback"][0]["value"], -0.5);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn environment_only_mode_reports_ignored_presses() {
    let b = bridge(5, None).await;
    let mut c = Client::connect(&b).await;
    c.start(live("fixed", 100_000)).await;
    c.press(1.0).await;
    assert_eq!(c.error().await["code"], "ignored_by_mode");
    let f = c.frame().await;
    assert!(f["r_components"]["human"].is_null());
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_start_leaves_session_idle() {
    let b = bridge(5, None).await;
    let mut c = Client::connect(&b).await;
    c.control("pause").await;
    assert_eq!(c.error().await["code"], "invalid_transition");
    c.send(json!({"v": 1, "type": "control", "action": "start", "config": {"max_steps": 0}})).await;
    assert_eq!(c.error().await["code"], "invalid_config");
    assert_eq!(b.state().phase, cotrain_bridge::Phase::Idle);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn trial_finishes_with_decimated_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BridgeConfig {
        step_period: Duration::from_millis(1),
        decimation: 5,
        log_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let b = serve(cfg, "127.0.0.1:0").await.unwrap();
    let mut c = Client::connect(&b).await;
    c.send(json!({"v": 1, "type": "control", "action": "start", "seed": 4, "config": live("fixed", 23)})).await;
    let (running, _) = c.phase("running").await;
    assert_eq!(running["seed"], 4);
    let (state, frames) = c.phase("finished").await;
    let ts: Vec<u64> = frames.iter().map(t).collect();
    assert_eq!(ts, [0, 5, 10, 15, 20, 22]);
    assert_eq!(state["step"], 23);
    assert!(state["fault"].is_null());
    let log = read_log(&state["log_path"]);
    assert_eq!(log.len(), 23);
    assert_eq!(log.last().unwrap().cumulative_reward, frames.last().unwrap()["cumulative_reward"].as_f64().unwrap());

    // a new start opens a new session and restarts the step count; the last step is always sent
    c.start(live("fixed", 3)).await;
    let (again, frames) = c.phase("finished").await;
    assert_ne!(again["session_id"], state["session_id"]);
    assert_eq!(frames.iter().map(t).collect::<Vec<_>>(), [0, 2]);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn live_emg_enters_the_state() {
    let b = bridge(5, None).await;
    let mut c = Client::connect(&b).await;
    let mut cfg = live("fixed", 100_000);
    cfg["emg"] = json!({"kind": "live", "calibration_max": 2.0});
    c.start(cfg).await;
    assert_eq!(c.frame().await["s_emg"], 0.0);
    c.send(json!({"v": 1, "type": "emg_sample", "s_raw": 1.0})).await;
    let f = c.until(|v| v["type"] == "telemetry" && v["s_emg"].as_f64().unwrap() > 0.0).await.0;
    // first smoothing step from zero toward 1.0 / 2.0
    assert!(f["s_emg"].as_f64().unwrap() <= 0.5 * 0.05 + 1e-15);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn status_endpoint_reports_session_state() {
    let b = bridge(5, None).await;
    let (line, idle) = http_get(&b, "/status").await;
    assert!(line.contains("200"), "{line}");
    assert_eq!(idle["phase"], "idle");
    assert_eq!(idle["step"], 0);
    assert_eq!(idle["clients"], 0);
    assert_eq!(idle["config"]["max_steps"], 40_000);
    assert!(idle["session_id"].as_str().unwrap().len() == 36);

    let mut c = Client::connect(&b).await;
    c.start(live("fixed", 100_000)).await;
    c.frame().await;
    let (_, running) = http_get(&b, "/health").await;
    assert_eq!(running["phase"], "running");
    assert_eq!(running["clients"], 1);
    assert!(running["step"].as_u64().unwrap() >= 1);
    assert_eq!(running["session_id"], idle["session_id"]);
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn occupied_address_fails_at_startup() {
    let b = bridge(5, None).await;
    let err = serve(BridgeConfig::default(), b.local_addr()).await.err().unwrap();
    assert!(matches!(err, BridgeError::Bind { .. }), "{err}");
    let bad = BridgeConfig { decimation: 0, ..Default::default() };
    assert!(matches!(serve(bad, "127.0.0.1:0").await.err().unwrap(), BridgeError::Config(_)));
    b.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_client_does_not_hold_up_the_loop() {
    let cfg = BridgeConfig { step_period: Duration::from_millis(1), client_buffer: 4, ..Default::default() };
    let b = serve(cfg, "127.0.0.1:0").await.unwrap();
    // Connected but never reads.
    let (_silent, _) = connect_async(format!("ws://{}/ws", b.local_addr())).await.unwrap();
    let mut c = Client::connect(&b).await;
    c.start(live("fixed", 1500)).await;
    let (state, frames) = tokio::time::timeout(Duration::from_secs(30), c.phase("finished")).await.unwrap();
    assert_eq!(state["step"], 1500);
    // The reading client may lag too, but every frame it saw is in order.
    assert!(frames.windows(2).all(|w| t(&w[1]) > t(&w[0])));
    b.shutdown().await;
}
