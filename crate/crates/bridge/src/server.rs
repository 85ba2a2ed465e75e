use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use tokio::net::{TcpListener, ToSocketAddrs};
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;

use crate::protocol::{decode, encode, ErrorCode, ErrorMsg, SessionState, WireMessage};
use crate::session::{initial_state, BridgeConfig, Channels, Command, Inbound, InboundQueue, SessionLoop};

/// A client that cannot accept a message within this long is dropped.
const SEND_TIMEOUT: Duration = Duration::from_secs(2);
const REPLY_BUFFER: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("invalid bridge config: {0}")]
    Config(#[from] cotrain_core::Error),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot spawn trial loop: {0}")]
    Spawn(std::io::Error),
}

struct App {
    queue: Arc<InboundQueue>,
    frames: broadcast::Sender<Arc<str>>,
    state: watch::Receiver<SessionState>,
    clients: Arc<AtomicUsize>,
    closing: watch::Receiver<bool>,
}

impl App {
    fn snapshot(&self) -> SessionState {
        let mut s = self.state.borrow().clone();
        s.clients = self.clients.load(Ordering::Relaxed);
        s
    }
}

/// A running session service.
pub struct BridgeHandle {
    addr: SocketAddr,
    app: Arc<App>,
    closing: watch::Sender<bool>,
    server: JoinHandle<()>,
    trial_loop: thread::JoinHandle<()>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Current session status, as served by the status endpoint.
    pub fn state(&self) -> SessionState {
        self.app.snapshot()
    }

    /// Waits for the next change of session status.
    pub async fn changed(&self) -> SessionState {
        let mut rx = self.app.state.clone();
        let _ = rx.changed().await;
        self.app.snapshot()
    }

    /// Disconnects clients, stops the trial loop and waits for both.
    pub async fn shutdown(self) {
        let _ = self.closing.send(true);
        self.app.queue.close();
        let trial_loop = self.trial_loop;
        if tokio::task::spawn_blocking(move || trial_loop.join()).await.is_err() {
            log::error!("trial loop panicked");
        }
        let _ = self.server.await;
    }
}

/// Binds `addr` and starts serving `/ws` (websocket session channel) and
/// `/status` plus `/health` (JSON session state).
pub async fn serve(cfg: BridgeConfig, addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<BridgeHandle, BridgeError> {
    cfg.validate()?;
    let label = format!("{addr:?}");
    let listener = TcpListener::bind(addr).await.map_err(|source| BridgeError::Bind { addr: label.clone(), source })?;
    let local = listener.local_addr().map_err(|source| BridgeError::Bind { addr: label, source })?;

    let queue = Arc::new(InboundQueue::new(cfg.queue_capacity));
    let (frames, _) = broadcast::channel(cfg.client_buffer);
    let (state_tx, state_rx) = watch::channel(initial_state(&cfg));
    let clients = Arc::new(AtomicUsize::new(0));
    let (closing_tx, closing_rx) = watch::channel(false);

    let session = SessionLoop::new(
        cfg,
        Channels { queue: queue.clone(), frames: frames.clone(), state: state_tx, clients: clients.clone() },
    );
    let trial_loop =
        thread::Builder::new().name("trial-loop".into()).spawn(move || session.run()).map_err(BridgeError::Spawn)?;

    let app = Arc::new(App { queue, frames, state: state_rx, clients, closing: closing_rx.clone() });
    let router = Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/status", get(status))
        .route("/health", get(status))
        .with_state(app.clone());
    let mut stop = closing_rx;
    let server = tokio::spawn(async move {
        let shutdown = async move {
            let _ = stop.wait_for(|c| *c).await;
        };
        if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(shutdown).await {
            log::error!("bridge server failed: {e}");
        }
    });
    log::info!("bridge listening on {local}");
    Ok(BridgeHandle { addr: local, app, closing: closing_tx, server, trial_loop })
}

async fn status(State(app): State<Arc<App>>) -> Json<SessionState> {
    Json(app.snapshot())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn send(socket: &mut WebSocket, text: &str) -> bool {
    matches!(tokio::time::timeout(SEND_TIMEOUT, socket.send(Message::Text(text.into()))).await, Ok(Ok(())))
}

async fn client(mut socket: WebSocket, app: Arc<App>) {
    let mut frames = app.frames.subscribe();
    let mut closing = app.closing.clone();
    app.clients.fetch_add(1, Ordering::Relaxed);
    let (reply_tx, mut reply_rx) = mpsc::channel(REPLY_BUFFER);

    if send(&mut socket, &encode(&WireMessage::State(app.snapshot()))).await {
        loop {
            tokio::select! {
                incoming = socket.recv() => {
                    let text = match incoming {
                        Some(Ok(Message::Text(t))) => t,
                        Some(Ok(Message::Binary(_))) => {
                            let err = ErrorMsg::new(ErrorCode::Malformed, "binary frames are not supported");
                            if !send(&mut socket, &encode(&WireMessage::Error(err))).await { break }
                            continue;
                        }
                        Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                        Some(Ok(_)) => continue,
                    };
                    if let Some(err) = route(&app, text.as_str(), &reply_tx) {
                        if !send(&mut socket, &encode(&WireMessage::Error(err))).await { break }
                    }
                }
                frame = frames.recv() => match frame {
                    Ok(text) => if !send(&mut socket, &text).await { break },
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::warn!("client fell {n} messages behind; disconnecting");
                        let err = ErrorMsg::new(ErrorCode::Lagged, format!("{n} messages missed; disconnecting"));
                        let _ = send(&mut socket, &encode(&WireMessage::Error(err))).await;
                        break;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                Some(reply) = reply_rx.recv() => {
                    if !send(&mut socket, &encode(&reply)).await { break }
                }
                _ = closing.changed() => break,
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
    app.clients.fetch_sub(1, Ordering::Relaxed);
}

/// Forwards a client message to the trial loop; returns an immediate error
/// reply for anything that cannot be queued.
fn route(app: &App, text: &str, reply: &mpsc::Sender<WireMessage>) -> Option<ErrorMsg> {
    let cmd = match decode(text) {
        Err(e) => return Some(e),
        Ok(WireMessage::Feedback(f)) => Command::Feedback { value: f.value, received: Instant::now() },
        Ok(WireMessage::Control(c)) => Command::Control(Box::new(c)),
        Ok(WireMessage::EmgSample(s)) => Command::Emg(s.s_raw),
        Ok(other) => {
            let kind = match other {
                WireMessage::Telemetry(_) => "telemetry",
                WireMessage::State(_) => "state",
                _ => "error",
            };
            return Some(ErrorMsg::new(ErrorCode::UnexpectedType, format!("clients may not send `{kind}` messages")));
        }
    };
    app.queue.push(Inbound { cmd, reply: Some(reply.clone()) });
    None
}
