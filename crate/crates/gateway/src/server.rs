//! `/session` WebSocket endpoint.
//!
//! The control loop runs on its own thread and never waits on the network.
//! Inbound commands reach it through an ordered channel and are drained at
//! the start of each tick. State snapshots go out through a watch channel
//! that only keeps the latest value, so a slow client skips snapshots while
//! its commands and error replies are still delivered in full.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};

use copilot_core::config::{ConfigError, ExperimentConfig};
use copilot_core::hil::TaskSetup;
use copilot_core::policy::BcPolicy;
use copilot_core::session::SessionError;

use crate::live::Controller;
use crate::protocol::{InboundMsg, OutboundMsg, ProtocolError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub stream_hz: f64,
    /// Pace the simulated clock to wall time.
    pub realtime: bool,
}

enum Control {
    Connect {
        replies: mpsc::UnboundedSender<OutboundMsg>,
        hello: oneshot::Sender<OutboundMsg>,
    },
    Command(InboundMsg),
    Disconnect,
}

struct Shared {
    control: std_mpsc::Sender<Control>,
    state: watch::Receiver<Option<Arc<String>>>,
    busy: AtomicBool,
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    control: Option<thread::JoinHandle<()>>,
    http: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs until the HTTP server stops.
    pub async fn wait(mut self) -> std::io::Result<()> {
        let r = (&mut self.http).await.unwrap_or_else(|e| Err(std::io::Error::other(e)));
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.control.take() {
            let _ = h.join();
        }
        r
    }

    pub async fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.http.abort();
        if let Some(h) = self.control.take() {
            let _ = tokio::task::spawn_blocking(move || h.join()).await;
        }
    }
}

/// Binds `addr`, starts the control loop and serves `/session`.
pub async fn serve(
    cfg: &ExperimentConfig,
    policy: Option<BcPolicy>,
    addr: SocketAddr,
    opts: ServeOptions,
) -> Result<Server, ServeError> {
    let setup = cfg.setup()?;
    // fail on a bad world before accepting connections
    Controller::new(&setup, policy.as_ref(), cfg.seed)?;
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(ServeError::PortInUse(addr.port())),
        Err(e) => return Err(e.into()),
    };
    let addr = listener.local_addr()?;
    let (ctl_tx, ctl_rx) = std_mpsc::channel();
    let (state_tx, state_rx) = watch::channel(None);
    let stop = Arc::new(AtomicBool::new(false));
    let seed = cfg.seed;
    let stop_loop = stop.clone();
    let control = thread::Builder::new()
        .name("control-loop".into())
        .spawn(move || control_loop(setup, policy, seed, opts, ctl_rx, state_tx, stop_loop))?;
    let shared = Arc::new(Shared {
        control: ctl_tx,
        state: state_rx,
        busy: AtomicBool::new(false),
    });
    let app = Router::new().route("/session", get(upgrade)).with_state(shared);
    let http = tokio::spawn(async move { axum::serve(listener, app).await });
    log::info!("serving /session on {addr}");
    Ok(Server {
        addr,
        stop,
        control: Some(control),
        http,
    })
}

fn control_loop(
    setup: TaskSetup,
    policy: Option<BcPolicy>,
    seed: u64,
    opts: ServeOptions,
    commands: std_mpsc::Receiver<Control>,
    state: watch::Sender<Option<Arc<String>>>,
    stop: Arc<AtomicBool>,
) {
    let dt = setup.session.dt;
    let every = ((1.0 / (opts.stream_hz * dt)).round() as u64).max(1);
    let open = || Controller::new(&setup, policy.as_ref(), seed).expect("world opened once already");
    let mut ctl = open();
    let mut replies: Option<mpsc::UnboundedSender<OutboundMsg>> = None;
    let mut ticks = 0u64;
    let mut next = Instant::now();
    let publish = |ctl: &mut Controller, state: &watch::Sender<Option<Arc<String>>>| match ctl.state() {
        Ok(m) => {
            state.send_replace(Some(Arc::new(OutboundMsg::State(Box::new(m)).to_json())));
        }
        Err(e) => log::error!("snapshot failed: {e}"),
    };
    while !stop.load(Ordering::Relaxed) {
        loop {
            match commands.try_recv() {
                Ok(Control::Connect { replies: r, hello }) => {
                    ctl = open();
                    ticks = 0;
                    publish(&mut ctl, &state);
                    let _ = hello.send(OutboundMsg::Hello(ctl.hello(opts.stream_hz)));
                    replies = Some(r);
                }
                Ok(Control::Command(m)) => {
                    if let Err(e) = ctl.apply(&m) {
                        log::info!("command rejected: {e}");
                        if let Some(r) = &replies {
                            let _ = r.send(OutboundMsg::error(e.code(), e.to_string()));
                        }
                    }
                }
                Ok(Control::Disconnect) => replies = None,
                Err(std_mpsc::TryRecvError::Empty) => break,
                Err(std_mpsc::TryRecvError::Disconnected) => return,
            }
        }
        if let Err(e) = ctl.tick() {
            log::error!("control tick failed, resetting the session: {e}");
            if let Some(r) = &replies {
                let _ = r.send(OutboundMsg::error("session_reset", e.to_string()));
            }
            ctl = open();
        }
        ticks += 1;
        if ticks % every == 0 {
            publish(&mut ctl, &state);
        }
        if opts.realtime {
            next += Duration::from_secs_f64(dt);
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            } else if now - next > Duration::from_millis(100) {
                next = now;
            }
        } else if ticks % 64 == 0 {
            thread::yield_now();
        }
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| run_session(socket, shared))
}

async fn send(sink: &mut futures_util::stream::SplitSink<WebSocket, Message>, text: String) -> bool {
    sink.send(Message::Text(text.into())).await.is_ok()
}

async fn run_session(socket: WebSocket, shared: Arc<Shared>) {
    let (mut sink, mut stream) = socket.split();
    if shared.busy.swap(true, Ordering::SeqCst) {
        let _ = send(&mut sink, OutboundMsg::error("busy", "another operator session is active").to_json()).await;
        let _ = sink.close().await;
        return;
    }
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel();
    let (hello_tx, hello_rx) = oneshot::channel();
    let connected = shared
        .control
        .send(Control::Connect {
            replies: reply_tx,
            hello: hello_tx,
        })
        .is_ok();
    if connected {
        if let Ok(hello) = hello_rx.await {
            let mut state = shared.state.clone();
            let first = state.borrow_and_update().clone();
            let mut alive = send(&mut sink, hello.to_json()).await;
            if let (true, Some(s)) = (alive, first) {
                alive = send(&mut sink, s.to_string()).await;
            }
            while alive {
                tokio::select! {
                    msg = stream.next() => match msg {
                        Some(Ok(Message::Text(t))) => match InboundMsg::parse(t.as_str()) {
                            Ok(m) => alive = shared.control.send(Control::Command(m)).is_ok(),
                            Err(e) => alive = reject(&mut sink, e).await,
                        },
                        Some(Ok(Message::Binary(_))) => alive = reject(&mut sink, ProtocolError::Binary).await,
                        Some(Ok(Message::Close(_))) | Some(Err(_)) | None => alive = false,
                        Some(Ok(_)) => {}
                    },
                    r = reply_rx.recv() => match r {
                        Some(m) => alive = send(&mut sink, m.to_json()).await,
                        None => alive = false,
                    },
                    c = state.changed() => {
                        if c.is_err() {
                            alive = false;
                        } else {
                            let latest = state.borrow_and_update().clone();
                            if let Some(s) = latest {
                                alive = send(&mut sink, s.to_string()).await;
                            }
                        }
                    }
                }
            }
        }
        let _ = shared.control.send(Control::Disconnect);
    }
    shared.busy.store(false, Ordering::SeqCst);
}

async fn reject(sink: &mut futures_util::stream::SplitSink<WebSocket, Message>, e: ProtocolError) -> bool {
    log::warn!("{e}");
    send(sink, OutboundMsg::error(e.code(), e.to_string()).to_json()).await
}
